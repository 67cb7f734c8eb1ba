"""Beam search over pluggable scorers.

Hypothesis scores are cumulative token log-probabilities without length
normalization, so scores only decrease as hypotheses grow; the search stops
once the best live score cannot beat the worst kept finished score.  Ties
break deterministically by token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .errors import ContractError, DecodeError


class Scorer(Protocol):
    """Incremental next-token scorer bound to a model."""

    eos_id: int
    vocab_size: int

    def initial(self, prefix) -> tuple[object, np.ndarray]:
        """Consume the prefix; return (state, next-token log-probs)."""

    def advance(self, state, token: int) -> tuple[object, np.ndarray]:
        """Append one token; return (new state, next-token log-probs)."""


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool
    state: object = field(default=None, repr=False)
    logprobs: Optional[np.ndarray] = field(default=None, repr=False)


def beam_search(
    scorer: Scorer,
    prefix,
    beam: int = 4,
    max_len: int = 16,
    n_best: Optional[int] = None,
) -> list[BeamHypothesis]:
    """Top-``n_best`` EOS-terminated hypotheses (default: beam of them).

    Hypotheses that run into ``max_len`` without EOS are only used to pad the
    result when fewer than requested finished; scores sort descending.
    """
    if beam < 1:
        raise ContractError(f"beam must be >= 1, got {beam}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    n_best = beam if n_best is None else n_best

    state, logprobs = scorer.initial(prefix)
    _check_scores(logprobs)
    live = [BeamHypothesis((), 0.0, False, state, logprobs)]
    finished: list[BeamHypothesis] = []
    keep = max(beam, n_best)

    for _ in range(max_len):
        candidates = []
        for hyp in live:
            for token in range(scorer.vocab_size):
                candidates.append(
                    (hyp.score + float(hyp.logprobs[token]), hyp.tokens + (token,), hyp)
                )
        candidates.sort(key=lambda c: (-c[0], c[1]))
        next_live = []
        for score, tokens, parent in candidates[:beam]:
            if tokens[-1] == scorer.eos_id:
                finished.append(BeamHypothesis(tokens, score, True))
            else:
                next_live.append((score, tokens, parent))
        finished.sort(key=lambda h: (-h.score, h.tokens))
        finished = finished[:keep]
        if not next_live:
            break
        # Scores can only decrease: stop once no live hypothesis can still
        # improve the kept finished pool.
        if len(finished) >= n_best and next_live[0][0] <= finished[n_best - 1].score:
            break
        live = []
        for score, tokens, parent in next_live:
            nstate, nlogprobs = scorer.advance(parent.state, tokens[-1])
            _check_scores(nlogprobs)
            live.append(BeamHypothesis(tokens, score, False, nstate, nlogprobs))

    results = list(finished)
    if len(results) < n_best and live:
        for hyp in sorted(live, key=lambda h: (-h.score, h.tokens)):
            results.append(BeamHypothesis(hyp.tokens, hyp.score, False))
            if len(results) >= n_best:
                break
    return results[:n_best]


def _check_scores(logprobs: np.ndarray) -> None:
    if np.isnan(logprobs).any():
        raise DecodeError("scorer emitted NaN log-probabilities; aborting beam search")


def greedy_decode(scorer: Scorer, prefix, max_len: int = 16) -> list[int]:
    """Argmax decoding; equivalent to beam_search with beam 1."""
    state, logprobs = scorer.initial(prefix)
    _check_scores(logprobs)
    tokens: list[int] = []
    for _ in range(max_len):
        token = int(np.argmax(logprobs))
        tokens.append(token)
        if token == scorer.eos_id:
            break
        state, logprobs = scorer.advance(state, token)
        _check_scores(logprobs)
    return tokens

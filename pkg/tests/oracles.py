"""Independent brute-force oracles used by the test suite.

These deliberately avoid the library's dynamic programming / beam pruning
code paths: CTC probabilities come from exhaustive enumeration over all
(V+1)^T alignments, and beam-search references from exhaustive enumeration
over all token sequences.
"""

from __future__ import annotations

import itertools

import numpy as np


def collapse_alignment(path, blank: int = 0) -> tuple:
    """Standard CTC collapse: merge repeats, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank:
            out.append(sym)
        prev = sym
    return tuple(out)


def brute_force_ctc_log_prob(log_probs: np.ndarray, target) -> float:
    """log P(target) by summing over every alignment of length T."""
    t_len, n_sym = log_probs.shape
    target = tuple(int(t) for t in target)
    scores = []
    for path in itertools.product(range(n_sym), repeat=t_len):
        if collapse_alignment(path) != target:
            continue
        scores.append(sum(log_probs[t, sym] for t, sym in enumerate(path)))
    if not scores:
        return -np.inf
    return float(np.logaddexp.reduce(np.array(scores, dtype=np.float64)))


def brute_force_ctc_prefix_log_prob(log_probs: np.ndarray, prefix) -> float:
    """log of the CTC *prefix* probability: total mass of alignments whose
    collapse starts with ``prefix`` (i.e. prefix is extendable or complete)."""
    t_len, n_sym = log_probs.shape
    prefix = tuple(int(t) for t in prefix)
    scores = []
    for path in itertools.product(range(n_sym), repeat=t_len):
        if collapse_alignment(path)[: len(prefix)] != prefix:
            continue
        scores.append(sum(log_probs[t, sym] for t, sym in enumerate(path)))
    if not scores:
        return -np.inf
    return float(np.logaddexp.reduce(np.array(scores, dtype=np.float64)))


def random_log_dist(rng: np.random.Generator, t_len: int, n_sym: int) -> np.ndarray:
    """Random fp64 row-normalized log-distributions."""
    logits = rng.normal(size=(t_len, n_sym))
    logits -= logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def exhaustive_sequences(scorer, prefix, vocab_size: int, eos_id: int, max_len: int):
    """Enumerate every EOS-terminated sequence of length <= max_len and score
    it by teacher-forcing the scorer. Returns [(tokens, score)] sorted by
    (-score, tokens)."""
    finished = []

    def recurse(tokens, state, logprobs, score):
        if len(tokens) >= max_len:
            return
        for tok in range(vocab_size):
            tok_score = score + float(logprobs[tok])
            seq = tokens + (tok,)
            if tok == eos_id:
                finished.append((seq, tok_score))
            else:
                nstate, nlogprobs = scorer.advance(state, tok)
                recurse(seq, nstate, nlogprobs, tok_score)

    state, logprobs = scorer.initial(prefix)
    recurse((), state, logprobs, 0.0)
    finished.sort(key=lambda item: (-item[1], item[0]))
    return finished

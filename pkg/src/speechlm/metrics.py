"""Corpus-level BLEU and token accuracy over token-id sequences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import ContractError

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float  # 0..100
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "brevity_penalty": self.brevity_penalty,
            "hyp_length": self.hyp_length,
            "ref_length": self.ref_length,
        }


def _ngrams(tokens, order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def corpus_bleu(hypotheses, references) -> BleuReport:
    """BLEU-4: clipped n-gram precisions aggregated corpus-level, geometric
    mean, multiplied by the brevity penalty.  Any zero precision gives BLEU 0
    (no smoothing)."""
    hypotheses = [list(h) for h in hypotheses]
    references = [list(r) for r in references]
    if not hypotheses:
        raise ContractError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for order in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, order)
            ref_counts = _ngrams(ref, order)
            totals[order - 1] += max(len(hyp) - order + 1, 0)
            matches[order - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in hyp_counts.items()
            )
    precisions = tuple(
        (matches[i] / totals[i]) if totals[i] > 0 else 0.0 for i in range(MAX_ORDER)
    )
    if min(precisions) > 0.0:
        geo_mean = math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        geo_mean = 0.0
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    return BleuReport(
        bleu=100.0 * geo_mean * bp,
        precisions=precisions,
        brevity_penalty=bp,
        hyp_length=hyp_len,
        ref_length=ref_len,
    )


def token_accuracy(hypotheses, references) -> float:
    """Position-wise matches over min length, divided by reference token count."""
    hypotheses = [list(h) for h in hypotheses]
    references = [list(r) for r in references]
    if not hypotheses:
        raise ContractError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    matches = 0
    total = 0
    for hyp, ref in zip(hypotheses, references):
        total += len(ref)
        matches += sum(1 for h, r in zip(hyp, ref) if h == r)
    if total == 0:
        raise ContractError("references contain no tokens")
    return matches / total

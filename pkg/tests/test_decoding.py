"""Beam search against exhaustive enumeration, plus metric oracles."""

import numpy as np
import pytest

from oracles import exhaustive_sequences
from speechlm.decoding import BeamHypothesis, beam_search, greedy_decode
from speechlm.errors import ContractError, DecodeError
from speechlm.metrics import corpus_bleu, token_accuracy


class TableScorer:
    """Deterministic scorer: next-token log-probs depend on (position, last
    token); rich enough to make every sequence score distinct."""

    def __init__(self, vocab_size, max_len, seed, eos_id=0):
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=2.0, size=(max_len + 1, vocab_size, vocab_size))
        self.table = logits - np.log(
            np.exp(logits - logits.max(-1, keepdims=True)).sum(-1, keepdims=True)
        ) - logits.max(-1, keepdims=True) * 0  # normalized below
        # normalize properly in log space
        m = logits.max(-1, keepdims=True)
        self.table = logits - (m + np.log(np.exp(logits - m).sum(-1, keepdims=True)))

    def initial(self, prefix):
        state = (0, 0)
        return state, self.table[0, 0]

    def advance(self, state, token):
        pos, _ = state
        new_state = (pos + 1, token)
        return new_state, self.table[min(pos + 1, len(self.table) - 1), token]


class NanScorer:
    vocab_size = 3
    eos_id = 0

    def initial(self, prefix):
        return None, np.array([0.0, np.nan, -1.0])

    def advance(self, state, token):
        return None, np.zeros(3)


@pytest.mark.parametrize("seed", range(8))
def test_beam_equals_exhaustive_when_beam_covers_space(seed):
    vocab, max_len = 4, 3
    scorer = TableScorer(vocab, max_len, seed)
    oracle = exhaustive_sequences(scorer, None, vocab, scorer.eos_id, max_len)
    n = min(5, len(oracle))
    hyps = beam_search(scorer, None, beam=vocab ** max_len, max_len=max_len, n_best=n)
    for hyp, (tokens, score) in zip(hyps, oracle[:n]):
        assert hyp.tokens == tokens
        assert hyp.score == pytest.approx(score, abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_beam_one_equals_greedy(seed):
    scorer = TableScorer(vocab_size=5, max_len=6, seed=seed)
    greedy = greedy_decode(scorer, None, max_len=6)
    hyps = beam_search(scorer, None, beam=1, max_len=6, n_best=1)
    assert list(hyps[0].tokens) == greedy


def test_scores_sorted_descending_and_finished_flagged():
    scorer = TableScorer(vocab_size=4, max_len=4, seed=3)
    hyps = beam_search(scorer, None, beam=6, max_len=4, n_best=6)
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        if h.finished:
            assert h.tokens[-1] == scorer.eos_id


def test_full_width_beam_dominates_any_narrower_beam():
    """Monotone improvement of the best score, in the form that is a theorem
    for pruned beam search: the exhaustive-width beam finds the global best
    finished hypothesis, so no narrower beam can beat it.  (Strict step-wise
    monotonicity in the beam width does not hold for any pruned search.)"""
    vocab, max_len = 4, 4
    for seed in range(25):
        scorer = TableScorer(vocab_size=vocab, max_len=max_len, seed=100 + seed)
        full = beam_search(scorer, None, beam=vocab ** max_len, max_len=max_len,
                           n_best=1)[0]
        assert full.finished
        for b in (1, 2, 3, 4, 6):
            narrow = beam_search(scorer, None, beam=b, max_len=max_len, n_best=1)[0]
            if narrow.finished:
                assert full.score >= narrow.score - 1e-12


def test_deterministic_tie_break_by_token_sequence():
    class UniformScorer:
        vocab_size = 3
        eos_id = 0

        def initial(self, prefix):
            return None, np.log(np.full(3, 1 / 3))

        def advance(self, state, token):
            return None, np.log(np.full(3, 1 / 3))

    # All candidates tie at every step, so selection is fully determined by
    # the token-sequence order: (0,) finishes first, then the expansions of
    # the lexicographically smallest live hypothesis.
    hyps = beam_search(UniformScorer(), None, beam=3, max_len=2, n_best=3)
    assert [h.tokens for h in hyps] == [(0,), (1, 0), (1, 1)]
    assert [h.finished for h in hyps] == [True, True, False]
    again = beam_search(UniformScorer(), None, beam=3, max_len=2, n_best=3)
    assert [h.tokens for h in again] == [h.tokens for h in hyps]


def test_nan_scores_abort():
    with pytest.raises(DecodeError, match="NaN"):
        beam_search(NanScorer(), None, beam=2, max_len=3)


def test_beam_validation():
    scorer = TableScorer(3, 3, 0)
    with pytest.raises(ContractError):
        beam_search(scorer, None, beam=0, max_len=3)
    with pytest.raises(ContractError):
        beam_search(scorer, None, beam=2, max_len=0)


# -- metrics --------------------------------------------------------------------


def test_bleu_identical_corpus_is_100():
    refs = [[1, 2, 3, 4, 5], [7, 8, 9, 10]]
    report = corpus_bleu(refs, refs)
    assert report.bleu == 100.0
    assert report.brevity_penalty == 1.0


def test_bleu_hand_computed_brevity_case():
    report = corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5]])
    assert report.precisions == (1.0, 1.0, 1.0, 1.0)
    assert report.brevity_penalty == pytest.approx(np.exp(1 - 5 / 4))
    assert report.bleu == pytest.approx(77.8800783, abs=1e-4)


def test_bleu_zero_precision_gives_zero():
    report = corpus_bleu([[1, 1, 1, 1]], [[2, 3, 4, 5]])
    assert report.bleu == 0.0


def test_bleu_empty_hypothesis_set_errors():
    with pytest.raises(ContractError):
        corpus_bleu([], [])


def test_bleu_permutation_invariant():
    rng = np.random.default_rng(0)
    hyps = [list(rng.integers(1, 9, size=rng.integers(4, 10))) for _ in range(12)]
    refs = [h[:-1] + [8] for h in hyps]
    a = corpus_bleu(hyps, refs)
    order = rng.permutation(len(hyps))
    b = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert a.bleu == pytest.approx(b.bleu, abs=1e-12)


def test_token_accuracy_cases():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[4, 5]], [[1, 2]]) == 0.0
    # one-off hand case: 2 matches of 4 reference tokens
    assert token_accuracy([[1, 9, 3]], [[1, 2, 3, 7]]) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        token_accuracy([], [])

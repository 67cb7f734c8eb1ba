"""Encoder-decoder baseline: loss decomposition, CTC prefix scoring against
the brute-force oracle, joint beam search, n-best rescoring."""

import numpy as np
import pytest

from oracles import brute_force_ctc_prefix_log_prob, brute_force_ctc_log_prob, random_log_dist
from speechlm.corpus import GeneratorConfig, generate_corpus
from speechlm.ctc import ctc_loss
from speechlm.errors import ConfigError
from speechlm.seq2seq import (
    CTC_EOS,
    CtcPrefixScorer,
    EncDecConfig,
    Seq2SeqModel,
    Seq2SeqScorer,
    ctc_prefix_score,
    joint_beam_search,
    rescore_nbest,
)
from speechlm.tensor import Tensor, grad_check, no_grad


def tiny_config(**kw):
    defaults = dict(enc_layers=1, dec_layers=1, model_dim=16, n_heads=2, ffn_dim=32,
                    vocab_size=40, ctc_vocab_size=32, feature_dim=8)
    defaults.update(kw)
    return EncDecConfig(**defaults)


def tiny_corpus(n=4, feature_dim=8):
    # short durations keep T' small (still CTC-feasible for 3-4 tokens)
    gen = GeneratorConfig(seed=5, feature_dim=feature_dim, duration_range=(8, 10),
                          utterance_length_range=(3, 4))
    return generate_corpus(gen, n)


def test_loss_decomposition_exact():
    model = Seq2SeqModel(tiny_config(), np.random.default_rng(0))
    batch = tiny_corpus()
    with no_grad():
        attn0, ctc0, total0 = model.seq2seq_forward(batch, ctc_weight=0.0)
        attn1, ctc1, total1 = model.seq2seq_forward(batch, ctc_weight=1.0)
        attn, ctc, total = model.seq2seq_forward(batch, ctc_weight=0.3)
    assert total0.item() == attn0.item()
    assert total1.item() == ctc1.item()
    np.testing.assert_allclose(total.item(), 0.7 * attn.item() + 0.3 * ctc.item(),
                               rtol=1e-6)


def test_joint_loss_gradient_check():
    model = Seq2SeqModel(tiny_config(), np.random.default_rng(1)).astype(np.float64)
    batch = tiny_corpus(n=2)
    named = dict(model.trainable_parameters())
    # one representative tensor from each subsystem keeps this quick
    picks = [named["frontend.bias1"], named["ctc_head.w"],
             named["encoder.0.attn.wq.w"], named["decoder.0.cross.wv.w"],
             named["dec_embed.table"], named["dec_norm.gain"]]

    def f():
        return model.seq2seq_forward(batch, ctc_weight=0.3)[2]

    err = grad_check(f, picks, max_coords_per_param=4,
                     rng=np.random.default_rng(2))
    assert err < 1e-4


def test_ctc_prefix_score_complete_target_matches_brute_force():
    rng = np.random.default_rng(3)
    for seed in range(6):
        r = np.random.default_rng(seed)
        t_len = int(r.integers(2, 6))
        lp = random_log_dist(r, t_len, 4)
        target = [int(r.integers(1, 4))]
        if t_len >= 2:
            target.append(int(r.integers(1, 4)))
            if target[1] == target[0] and t_len < 3:
                target = target[:1]
        total = 0.0
        for i, tok in enumerate(target):
            total += ctc_prefix_score(lp, target[:i], tok)
        total += ctc_prefix_score(lp, target, CTC_EOS)
        ref = brute_force_ctc_log_prob(lp, target)
        if np.isfinite(ref):
            np.testing.assert_allclose(total, ref, atol=1e-8)


def test_ctc_prefix_probability_matches_brute_force_prefix_mass():
    for seed in range(6):
        r = np.random.default_rng(100 + seed)
        t_len = int(r.integers(2, 6))
        lp = random_log_dist(r, t_len, 4)
        prefix = [int(r.integers(1, 4))]
        psi = ctc_prefix_score(lp, [], prefix[0])
        ref = brute_force_ctc_prefix_log_prob(lp, prefix)
        np.testing.assert_allclose(psi, ref, atol=1e-8)


def test_prefix_score_increments_sum_to_ctc_loss():
    rng = np.random.default_rng(4)
    lp = random_log_dist(rng, 6, 5)
    target = [2, 4, 1]
    total = 0.0
    for i, tok in enumerate(target):
        total += ctc_prefix_score(lp, target[:i], tok)
    total += ctc_prefix_score(lp, target, CTC_EOS)
    loss = ctc_loss(Tensor(lp, dtype=np.float64), target).item()
    np.testing.assert_allclose(total, -loss, atol=1e-8)


def test_prefix_scores_monotone_nonincreasing():
    rng = np.random.default_rng(5)
    lp = random_log_dist(rng, 6, 5)
    scorer = CtcPrefixScorer(lp)
    state = scorer.initial_state()
    prev_psi = 0.0
    for tok in (2, 3, 1):
        scores, states = scorer.score_candidates(state, np.array([tok]))
        assert scores[0] <= prev_psi + 1e-12
        prev_psi = float(scores[0])
        state = states[0]


def test_initial_state_blank_mass():
    lp = random_log_dist(np.random.default_rng(6), 4, 3)
    scorer = CtcPrefixScorer(lp)
    r, psi, last = scorer.initial_state()
    np.testing.assert_allclose(r[:, 1], np.cumsum(lp[:, 0]), atol=1e-12)
    assert psi == 0.0 and last is None


def test_joint_weight_zero_equals_attention_only_beam():
    model = Seq2SeqModel(tiny_config(), np.random.default_rng(7))
    ex = tiny_corpus(n=1)[0]
    plain = joint_beam_search(model, ex, beam=3, ctc_decode_weight=0.0,
                              max_len=6, n_best=3)
    from speechlm.decoding import beam_search

    direct = beam_search(Seq2SeqScorer(model), ex, beam=3, max_len=6, n_best=3)
    assert [h.tokens for h in plain] == [h.tokens for h in direct]
    for a, b in zip(plain, direct):
        assert a.score == pytest.approx(b.score, abs=1e-9)


def test_joint_weight_one_tracks_ctc_prefix_argmax():
    """With w=1 and a wide beam on a tiny instance, the best hypothesis is the
    brute-force argmax of the CTC-complete-sequence probability."""
    model = Seq2SeqModel(tiny_config(ctc_vocab_size=4), np.random.default_rng(8))
    ex = tiny_corpus(n=1)[0]

    hyps = joint_beam_search(model, ex, beam=40, ctc_decode_weight=1.0,
                             max_len=4, n_best=1)
    assert hyps[0].finished
    _, ctc_lp = model.encode_example(ex)

    # brute-force over all content sequences up to length 3 in source space
    from itertools import product

    best_seq, best_score = None, -np.inf
    for length in (1, 2, 3):
        for seq in product(range(1, 4), repeat=length):
            score = brute_force_ctc_log_prob(ctc_lp, list(seq))
            if score > best_score:
                best_seq, best_score = seq, score
    from speechlm.decoder import CONTENT_OFFSET, EOS_ID

    got = tuple(t - CONTENT_OFFSET for t in hyps[0].tokens if t != EOS_ID)
    assert got == best_seq
    np.testing.assert_allclose(hyps[0].score, best_score, atol=1e-5)


def test_nbest_scores_sorted_descending():
    model = Seq2SeqModel(tiny_config(), np.random.default_rng(9))
    ex = tiny_corpus(n=1)[0]
    hyps = joint_beam_search(model, ex, beam=4, ctc_decode_weight=0.3,
                             max_len=6, n_best=4)
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)


def _fake_nbest():
    return [
        {"rank": 1, "tokens": [1, 2], "seq2seq_score": -1.0},
        {"rank": 2, "tokens": [3], "seq2seq_score": -1.5},
        {"rank": 3, "tokens": [4, 5], "seq2seq_score": -2.0},
    ]


def test_rescore_mu_zero_keeps_order():
    lm_scores = {(1, 2): -9.0, (3,): -1.0, (4, 5): -2.0}
    out = rescore_nbest(_fake_nbest(), lambda t: lm_scores[tuple(t)], 0.0)
    assert [h["tokens"] for h in out] == [[1, 2], [3], [4, 5]]
    assert [h["rank"] for h in out] == [1, 2, 3]


def test_rescore_mu_one_orders_by_lm():
    lm_scores = {(1, 2): -9.0, (3,): -1.0, (4, 5): -2.0}
    out = rescore_nbest(_fake_nbest(), lambda t: lm_scores[tuple(t)], 1.0)
    assert [h["tokens"] for h in out] == [[3], [4, 5], [1, 2]]


def test_rescore_hand_interpolation():
    # mu=0.5: final = 0.5*seq + 0.5*lm
    hyps = [
        {"rank": 1, "tokens": [1], "seq2seq_score": -1.0},
        {"rank": 2, "tokens": [2], "seq2seq_score": -1.2},
    ]
    lm_scores = {(1,): -3.0, (2,): -0.4}
    out = rescore_nbest(hyps, lambda t: lm_scores[tuple(t)], 0.5)
    # hyp2: 0.5*(-1.2) + 0.5*(-0.4) = -0.8 beats hyp1: 0.5*(-1.0) + 0.5*(-3.0) = -2.0
    assert out[0]["tokens"] == [2]
    assert out[0]["final_score"] == pytest.approx(-0.8)
    assert out[1]["final_score"] == pytest.approx(-2.0)


def test_rescore_stable_on_ties():
    hyps = [
        {"rank": 1, "tokens": [1], "seq2seq_score": -1.0},
        {"rank": 2, "tokens": [2], "seq2seq_score": -1.0},
    ]
    out = rescore_nbest(hyps, lambda t: -5.0, 0.7)
    assert [h["tokens"] for h in out] == [[1], [2]]


def test_rescore_weight_validation():
    with pytest.raises(ConfigError):
        rescore_nbest(_fake_nbest(), lambda t: 0.0, 1.5)


def test_encoder_ctc_head_normalized():
    model = Seq2SeqModel(tiny_config(), np.random.default_rng(10))
    ex = tiny_corpus(n=1)[0]
    _, ctc_lp = model.encode_example(ex)
    np.testing.assert_allclose(np.exp(ctc_lp).sum(axis=-1), 1.0, atol=1e-5)

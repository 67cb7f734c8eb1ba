"""Encoder-decoder speech translation baseline with an auxiliary CTC head,
joint CTC/attention prefix decoding, and n-best rescoring against a text LM.

The encoder is a conv frontend plus bidirectional transformer layers with
sinusoidal positions; the decoder reuses the rotary pre-norm blocks with
cross-attention in every layer.  The CTC prefix score follows the standard
blank/non-blank forward-variable recursion over label prefixes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .corpus import CorpusExample
from .ctc import ctc_loss
from .decoder import BOS_ID, CONTENT_OFFSET, DecodeState, EOS_ID, shift_tokens
from .errors import ConfigError, ContractError
from .nn import (
    ConvFrontend,
    DecoderLayer,
    Embedding,
    EncoderLayer,
    Linear,
    Module,
    RmsNorm,
    ceil_div,
    encoder_attention_mask,
    length_mask,
    pad_stack,
    sinusoidal_positions,
)
from .tensor import Tensor, no_grad

LOG_ZERO = -1e10
CTC_EOS = -1  # sentinel "next token" meaning end-of-sequence for prefix scoring


@dataclass(frozen=True)
class EncDecConfig:
    enc_layers: int = 5
    dec_layers: int = 5
    model_dim: int = 192
    n_heads: int = 4
    ffn_dim: int = 768
    vocab_size: int = 48  # text side, shared special-token scheme
    ctc_vocab_size: int = 32  # source side, includes blank at 0
    feature_dim: int = 16
    ctc_weight_train: float = 0.3
    norm_eps: float = 1e-5
    max_frames: int = 4096

    def validate(self) -> "EncDecConfig":
        if not 0.0 <= self.ctc_weight_train <= 1.0:
            raise ConfigError(f"ctc_weight_train must be in [0, 1], got {self.ctc_weight_train}")
        return self


@dataclass(frozen=True)
class RescoreConfig:
    interpolation: float = 0.5  # weight on the external LM score
    n_best: int = 5

    def validate(self) -> "RescoreConfig":
        if not 0.0 <= self.interpolation <= 1.0:
            raise ConfigError(f"interpolation weight must be in [0, 1], got {self.interpolation}")
        if self.n_best < 1:
            raise ConfigError("n_best must be >= 1")
        return self


class Seq2SeqModel(Module):
    def __init__(self, config: EncDecConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config.validate()
        d = config.model_dim
        self.frontend = ConvFrontend(config.feature_dim, d, rng)
        self.enc_list = []
        enc_scale = 1.0 / np.sqrt(2.0 * config.enc_layers)
        for i in range(config.enc_layers):
            layer = EncoderLayer(d, config.n_heads, config.ffn_dim, rng, config.norm_eps,
                                 residual_scale=enc_scale)
            self.register_module(f"encoder.{i}", layer)
            self.enc_list.append(layer)
        self.enc_norm = RmsNorm(d, config.norm_eps)
        self.ctc_head = Linear(d, config.ctc_vocab_size, rng)
        self.dec_embed = Embedding(config.vocab_size, d, rng)
        self.dec_list = []
        dec_scale = 1.0 / np.sqrt(3.0 * config.dec_layers)
        for i in range(config.dec_layers):
            layer = DecoderLayer(d, config.n_heads, config.ffn_dim, rng,
                                 cross_attention=True, norm_eps=config.norm_eps,
                                 residual_scale=dec_scale)
            self.register_module(f"decoder.{i}", layer)
            self.dec_list.append(layer)
        self.dec_norm = RmsNorm(d, config.norm_eps)
        self.dec_head = Linear(d, config.vocab_size, rng)
        self._pos_table = sinusoidal_positions(config.max_frames, d)

    # -- encoder ---------------------------------------------------------------

    def encode_batch(self, features: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        x = self.frontend(features, lengths)
        enc_lens = ceil_div(ceil_div(np.asarray(lengths), 2), 2)
        pos = self._pos_table[: x.shape[1]].astype(x.data.dtype)
        x = x + Tensor(np.broadcast_to(pos, x.shape))
        mask = encoder_attention_mask(enc_lens, x.shape[1])
        for layer in self.enc_list:
            x = layer(x, mask=mask)
        return self.enc_norm(x), enc_lens

    def encoder_ctc_log_probs(self, memory: Tensor) -> Tensor:
        return ops.log_softmax(self.ctc_head(memory), axis=-1)

    # -- training loss ------------------------------------------------------------

    def seq2seq_forward(self, examples: list[CorpusExample],
                        ctc_weight: Optional[float] = None) -> tuple[Tensor, Tensor, Tensor]:
        """(attention CE, CTC loss, total = (1-w) attn + w ctc) over a batch."""
        w = self.config.ctc_weight_train if ctc_weight is None else ctc_weight
        feats, f_lens = pad_stack([ex.features for ex in examples])
        memory, enc_lens = self.encode_batch(Tensor(feats, dtype=self.param_dtype), f_lens)

        ctc_lp = self.encoder_ctc_log_probs(memory)
        ctc_terms = []
        for i, ex in enumerate(examples):
            valid = ctc_lp[i, : int(enc_lens[i])]
            ctc_terms.append(ctc_loss(valid, np.asarray(ex.source_tokens)))
        ctc_total = ctc_terms[0]
        for term in ctc_terms[1:]:
            ctc_total = ctc_total + term
        ctc_mean = ctc_total * (1.0 / len(ctc_terms))

        targets = [np.concatenate([shift_tokens(ex.target_tokens), [EOS_ID]])
                   for ex in examples]
        b = len(examples)
        n_lens = np.array([len(t) for t in targets])
        n_max = int(n_lens.max())
        inputs = np.zeros((b, n_max), dtype=np.int64)
        labels = np.full((b, n_max), -1, dtype=np.int64)
        for i, tgt in enumerate(targets):
            inputs[i, 0] = BOS_ID
            inputs[i, 1 : len(tgt)] = tgt[:-1]
            labels[i, : len(tgt)] = tgt
        dec_valid = length_mask(n_lens, n_max)
        self_mask = (np.tril(np.ones((n_max, n_max), dtype=bool))[None]
                     & dec_valid[:, None, :] & dec_valid[:, :, None])
        cross_mask = np.repeat(length_mask(enc_lens, memory.shape[1])[:, None, :], n_max, axis=1)

        x = self.dec_embed(inputs)
        positions = np.broadcast_to(np.arange(n_max)[None], (b, n_max))
        for layer in self.dec_list:
            x = layer(x, mask=self_mask, positions=positions,
                      memory=memory, memory_mask=cross_mask)
        logits = self.dec_head(self.dec_norm(x))
        attn = ops.cross_entropy(logits.reshape(b * n_max, -1), labels.reshape(-1),
                                 ignore_index=-1)
        total = attn * (1.0 - w) + ctc_mean * w
        return attn, ctc_mean, total

    # -- incremental decoding --------------------------------------------------------

    def encode_example(self, example: CorpusExample) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            memory, enc_lens = self.encode_batch(
                Tensor(example.features[None].astype(self.param_dtype)),
                np.array([example.features.shape[0]]),
            )
            t = int(enc_lens[0])
            ctc_lp = self.encoder_ctc_log_probs(memory).data[0, :t]
        return memory.data[0, :t], ctc_lp

    def _decode_step(self, state: DecodeState, tokens: np.ndarray,
                     memory: Tensor) -> tuple[np.ndarray, DecodeState]:
        """Run ``tokens`` (new positions) against the cache; returns last-row
        log-probs and the new state."""
        with no_grad():
            n = len(tokens)
            positions = (state.length + np.arange(n))[None]
            x = self.dec_embed(tokens).reshape(1, n, -1)
            mem = memory.reshape(1, memory.shape[0], -1)
            new_keys, new_values = [], []
            causal = np.tril(np.ones((state.length + n, state.length + n), dtype=bool))
            mask4 = causal[None, None, state.length :, :]
            for li, layer in enumerate(self.dec_list):
                attn = layer.attn
                h = layer.attn_norm(x)
                q = attn._split(attn.wq(h))
                k = attn._split(attn.wk(h))
                v = attn._split(attn.wv(h))
                q, k = ops.rope_apply(q, k, positions, attn.rope_base)
                if state.keys[li] is not None:
                    k_all = Tensor(np.concatenate([state.keys[li], k.data], axis=2))
                    v_all = Tensor(np.concatenate([state.values[li], v.data], axis=2))
                else:
                    k_all, v_all = k, v
                new_keys.append(k_all.data)
                new_values.append(v_all.data)
                scores = (q * (1.0 / np.sqrt(attn.head_dim))) @ k_all.transpose(0, 1, 3, 2)
                scores = ops.masked_fill(scores, mask4)
                x = x + attn.wo(attn._join(ops.softmax(scores, axis=-1) @ v_all))
                x = x + layer.cross(layer.cross_norm(x), memory=mem)
                x = x + layer.ffn(layer.ffn_norm(x))
            logits = self.dec_head(self.dec_norm(x))[0]
            logp = ops.log_softmax(logits, axis=-1).data[-1]
        return logp, DecodeState(new_keys, new_values, state.length + n)


class Seq2SeqScorer:
    """Attention-only incremental scorer for beam search."""

    def __init__(self, model: Seq2SeqModel):
        self.model = model
        self.eos_id = EOS_ID
        self.vocab_size = model.config.vocab_size

    def initial(self, example: CorpusExample):
        memory, _ = self.model.encode_example(example)
        self._memory = Tensor(memory)
        state = DecodeState([None] * len(self.model.dec_list),
                            [None] * len(self.model.dec_list), 0)
        logp, state = self.model._decode_step(state, np.array([BOS_ID]), self._memory)
        return state, logp

    def advance(self, state, token: int):
        return_state = self.model._decode_step(state, np.array([token]), self._memory)
        return return_state[1], return_state[0]


# -- CTC prefix scoring ------------------------------------------------------------


class CtcPrefixScorer:
    """Blank/non-blank forward variables per label prefix (source-id space).

    State is (r, psi, last): ``r[t, 0]`` is the log-mass of alignments up to
    frame t realizing the prefix and ending in its last label, ``r[t, 1]``
    those ending in blank; ``psi`` is the prefix log-probability.
    """

    def __init__(self, log_probs: np.ndarray, blank: int = 0):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.n_frames = self.lp.shape[0]
        self.blank = blank

    def initial_state(self):
        r = np.full((self.n_frames, 2), LOG_ZERO)
        r[0, 1] = self.lp[0, self.blank]
        for t in range(1, self.n_frames):
            r[t, 1] = r[t - 1, 1] + self.lp[t, self.blank]
        return r, 0.0, None

    def score_candidates(self, state, candidates: np.ndarray):
        """log prefix probabilities psi(g + c) for each candidate label c,
        plus per-candidate successor states."""
        r_prev, psi_prev, last = state
        cands = np.asarray(candidates, dtype=np.int64)
        n_c = len(cands)
        t_len = self.n_frames
        xs = self.lp[:, cands]  # (T, C)
        r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
        log_phi = np.repeat(r_sum[:, None], n_c, axis=1)
        if last is not None:
            log_phi[:, cands == last] = r_prev[:, 1][:, None]

        r_new = np.full((t_len, 2, n_c), LOG_ZERO)
        r_new[0, 0] = xs[0] if last is None else LOG_ZERO
        log_psi = r_new[0, 0].copy()
        for t in range(1, t_len):
            r_new[t, 0] = np.logaddexp(r_new[t - 1, 0], log_phi[t - 1]) + xs[t]
            r_new[t, 1] = np.logaddexp(r_new[t - 1, 0], r_new[t - 1, 1]) + self.lp[t, self.blank]
            log_psi = np.logaddexp(log_psi, log_phi[t - 1] + xs[t])
        states = [
            (r_new[:, :, i].copy(), float(log_psi[i]), int(cands[i]))
            for i in range(n_c)
        ]
        return log_psi, states

    def eos_score(self, state) -> float:
        """log-probability that the prefix is the complete sequence."""
        r_prev, _, _ = state
        return float(np.logaddexp(r_prev[-1, 0], r_prev[-1, 1]))


def ctc_prefix_score(encoder_ctc_log_probs: np.ndarray, prefix, next_token: int) -> float:
    """Incremental joint-decoding score: psi(prefix + next) - psi(prefix).

    ``next_token`` uses source-token ids; pass ``CTC_EOS`` to score ending
    the sequence, in which case the increment completes the telescoping sum
    so that the increments along a full target add up to the total CTC
    log-probability of that target.
    """
    scorer = CtcPrefixScorer(encoder_ctc_log_probs)
    state = scorer.initial_state()
    psi = 0.0
    for token in prefix:
        scores, states = scorer.score_candidates(state, np.array([token]))
        state = states[0]
        psi = float(scores[0])
    if next_token == CTC_EOS:
        return scorer.eos_score(state) - psi
    scores, _ = scorer.score_candidates(state, np.array([next_token]))
    return float(scores[0]) - psi


class JointScorer:
    """Hypothesis score = (1 - w) * attention log-prob + w * CTC prefix score."""

    def __init__(self, model: Seq2SeqModel, ctc_weight: float):
        if not 0.0 <= ctc_weight <= 1.0:
            raise ConfigError(f"ctc decode weight must be in [0, 1], got {ctc_weight}")
        self.model = model
        self.w = ctc_weight
        self.eos_id = EOS_ID
        self.vocab_size = model.config.vocab_size
        self.content_lo = CONTENT_OFFSET + 1
        self.content_hi = CONTENT_OFFSET + model.config.ctc_vocab_size  # exclusive

    def _combined(self, attn_logp: np.ndarray, ctc_state) -> tuple[np.ndarray, list]:
        if self.w == 0.0:
            return attn_logp.astype(np.float64), [ctc_state] * self.vocab_size
        source_ids = np.arange(1, self.model.config.ctc_vocab_size)
        psi, next_states = self.ctc.score_candidates(ctc_state, source_ids)
        _, psi_prev, _ = ctc_state
        increments = np.full(self.vocab_size, LOG_ZERO)
        increments[self.content_lo : self.content_hi] = psi - psi_prev
        increments[EOS_ID] = self.ctc.eos_score(ctc_state) - psi_prev
        states: list = [ctc_state] * self.vocab_size
        for sid, st in zip(source_ids, next_states):
            states[sid + CONTENT_OFFSET] = st
        combined = (1.0 - self.w) * attn_logp.astype(np.float64) + self.w * increments
        return combined, states

    def initial(self, example: CorpusExample):
        dec = Seq2SeqScorer(self.model)
        dec_state, attn_logp = dec.initial(example)
        self._dec = dec
        _, ctc_lp = self.model.encode_example(example)
        self.ctc = CtcPrefixScorer(ctc_lp)
        ctc_state = self.ctc.initial_state()
        combined, states = self._combined(attn_logp, ctc_state)
        return (dec_state, ctc_state, states), combined

    def advance(self, state, token: int):
        dec_state, _, pending = state
        new_dec, attn_logp = self._dec.advance(dec_state, token)
        ctc_state = pending[token]
        combined, states = self._combined(attn_logp, ctc_state)
        return (new_dec, ctc_state, states), combined


def joint_beam_search(model: Seq2SeqModel, example: CorpusExample, beam: int,
                      ctc_decode_weight: float, max_len: int, n_best: int):
    from .decoding import beam_search

    scorer = JointScorer(model, ctc_decode_weight) if ctc_decode_weight > 0 \
        else Seq2SeqScorer(model)
    return beam_search(scorer, example, beam=beam, max_len=max_len, n_best=n_best)


def rescore_nbest(hypotheses: list[dict], lm_score_fn, interpolation: float) -> list[dict]:
    """Log-linear reranking: final = (1 - mu) * seq2seq + mu * LM.

    ``hypotheses`` are dicts with "tokens" (source-id space) and
    "seq2seq_score"; the list is stably re-sorted by the final score.
    """
    if not 0.0 <= interpolation <= 1.0:
        raise ConfigError(f"interpolation weight must be in [0, 1], got {interpolation}")
    rescored = []
    for hyp in hypotheses:
        lm_score = hyp.get("lm_score")
        if lm_score is None:
            lm_score = lm_score_fn(hyp["tokens"])
        final = (1.0 - interpolation) * hyp["seq2seq_score"] + interpolation * lm_score
        updated = dict(hyp)
        updated["lm_score"] = lm_score
        updated["final_score"] = final
        rescored.append(updated)
    order = sorted(range(len(rescored)), key=lambda i: -rescored[i]["final_score"])
    reranked = [rescored[i] for i in order]
    for rank, hyp in enumerate(reranked, start=1):
        hyp["rank"] = rank
    return reranked

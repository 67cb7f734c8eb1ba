"""CTC loss, greedy alignment, duration compression rules, and the
pretrain-then-freeze compressor network.

The loss runs the standard forward algorithm over the blank-interleaved label
sequence in fp64 log space; its gradient is the negative state-occupancy
posterior, computed with the matching backward recursion.  Both compression
rules consume the final pre-head hidden states together with the per-frame
argmax alignment.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import ops
from .errors import ContractError, CtcInfeasibleError, ShapeError
from .nn import ConvFrontend, EncoderLayer, Linear, Module, RmsNorm, ceil_div, encoder_attention_mask, sinusoidal_positions
from .tensor import Tensor, make_node

BLANK = 0
NEG_INF = -np.inf


class CompressionMode(str, Enum):
    BLANK_REMOVE = "blank_remove"
    FRAME_AVERAGE = "frame_average"


@dataclass
class CtcPosteriorgram:
    """Per-frame log-distributions over vocab-plus-blank and their argmax."""

    log_probs: np.ndarray  # (T', V+1), rows normalized
    alignment: np.ndarray  # (T',) int, ties resolved to the lowest index

    @classmethod
    def from_log_probs(cls, log_probs: np.ndarray) -> "CtcPosteriorgram":
        return cls(log_probs=log_probs, alignment=greedy_alignment(log_probs))


def _extended_labels(target: np.ndarray) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def check_feasible(n_frames: int, target: np.ndarray) -> None:
    repeats = int(np.sum(target[1:] == target[:-1])) if len(target) > 1 else 0
    needed = len(target) + repeats
    if n_frames < needed:
        raise CtcInfeasibleError(
            f"target of length {len(target)} with {repeats} adjacent repeats "
            f"needs at least {needed} frames, got {n_frames}"
        )


def _forward_alphas(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    t_len, s_len = lp.shape[0], len(ext)
    # Transition s-2 -> s is legal only for non-blank states with a different
    # predecessor label.
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate([[NEG_INF], prev[:-1]])
        acc = np.logaddexp(stay, step)
        skip = np.concatenate([[NEG_INF, NEG_INF], prev[:-2]])
        acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + lp[t, ext]
    return alpha


def _backward_betas(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    t_len, s_len = lp.shape[0], len(ext)
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[: s_len - 2] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.concatenate([nxt[1:], [NEG_INF]])
        acc = np.logaddexp(stay, step)
        skip = np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])
        acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        beta[t] = acc
    return beta


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """Negative log-probability of all alignments collapsing to ``target``.

    ``log_probs`` is (T, V+1) with blank at index 0, rows normalized.
    Differentiable w.r.t. ``log_probs``; infeasible targets raise instead of
    returning an infinite loss.
    """
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss expects (T, V+1) log-probs, got {log_probs.shape}")
    target = np.asarray(target, dtype=np.int64)
    if target.ndim != 1 or len(target) < 1:
        raise ContractError("target must be a non-empty 1-D token sequence")
    if (target == BLANK).any():
        raise ContractError("target contains the blank id")
    if target.min() < 0 or target.max() >= log_probs.shape[1]:
        raise ContractError("target id outside vocabulary-plus-blank range")
    check_feasible(log_probs.shape[0], target)

    lp = log_probs.data.astype(np.float64)
    ext = _extended_labels(target)
    alpha = _forward_alphas(lp, ext)
    s_len = len(ext)
    tail = alpha[-1, s_len - 2 :] if s_len > 1 else alpha[-1, -1:]
    log_p = np.logaddexp.reduce(tail)
    out = make_node(np.asarray(-log_p, dtype=log_probs.data.dtype), (log_probs,))
    if out._parents:

        def vjp(g):
            beta = _backward_betas(lp, ext)
            occup = np.exp(alpha + beta - log_p)  # (T, S) state occupancy
            grad = np.zeros_like(lp)
            np.add.at(grad.T, ext, occup.T)
            return ((-grad * float(g)).astype(log_probs.data.dtype),)

        out._vjp = vjp
    return out


def greedy_alignment(log_probs: np.ndarray) -> np.ndarray:
    """Per-frame argmax; np.argmax already resolves ties to the lowest index."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if lp.ndim != 2:
        raise ShapeError(f"expected (T, V+1) posteriors, got {lp.shape}")
    return np.argmax(lp, axis=1)


def _mean_row(hidden: Tensor) -> Tensor:
    return hidden.mean(axis=0, keepdims=True)


def compress_blank_remove(hidden: Tensor, alignment: np.ndarray) -> Tensor:
    """Keep rows whose predicted class is non-blank, order preserved.

    If every frame is blank, returns one row equal to the mean of all rows so
    the downstream prefix is never empty.
    """
    alignment = np.asarray(alignment)
    if hidden.shape[0] != len(alignment):
        raise ContractError(
            f"alignment length {len(alignment)} != hidden rows {hidden.shape[0]}"
        )
    keep = np.nonzero(alignment != BLANK)[0]
    if len(keep) == 0:
        return _mean_row(hidden)
    from .tensor import gather_rows

    return gather_rows(hidden, keep)


def segment_runs(alignment: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal runs of equal alignment values as (value, start, stop)."""
    alignment = np.asarray(alignment)
    if len(alignment) == 0:
        return []
    boundaries = np.nonzero(np.diff(alignment))[0] + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [len(alignment)]])
    return [(int(alignment[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def compress_frame_average(
    hidden: Tensor, alignment: np.ndarray, drop_blank_runs: bool = False
) -> Tensor:
    """One output row per maximal run of identical predictions: the arithmetic
    mean of the run.  Blank runs are kept as averaged rows by default; set
    ``drop_blank_runs`` to discard them instead."""
    alignment = np.asarray(alignment)
    if hidden.shape[0] != len(alignment):
        raise ContractError(
            f"alignment length {len(alignment)} != hidden rows {hidden.shape[0]}"
        )
    runs = segment_runs(alignment)
    if drop_blank_runs:
        runs = [r for r in runs if r[0] != BLANK]
        if not runs:
            return _mean_row(hidden)
    weights = np.zeros((len(runs), hidden.shape[0]), dtype=hidden.data.dtype)
    for row, (_, start, stop) in enumerate(runs):
        weights[row, start:stop] = 1.0 / (stop - start)
    return Tensor(weights) @ hidden


def compress(hidden: Tensor, posteriorgram: CtcPosteriorgram, mode: CompressionMode,
             drop_blank_runs: bool = False) -> Tensor:
    if mode == CompressionMode.BLANK_REMOVE:
        return compress_blank_remove(hidden, posteriorgram.alignment)
    return compress_frame_average(hidden, posteriorgram.alignment, drop_blank_runs)


@dataclass(frozen=True)
class CtcCompressorConfig:
    feature_dim: int = 16
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 32  # includes the blank at index 0
    conv_channels: int = 8
    norm_eps: float = 1e-5
    max_frames: int = 4096


class CtcCompressor(Module):
    """Conv frontend (4x time reduction) + transformer body + linear CTC head.

    The hidden states passed onward for compression are the body outputs that
    feed the CTC head.
    """

    def __init__(self, config: CtcCompressorConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.frontend = ConvFrontend(config.feature_dim, config.hidden_dim, rng,
                                     channels=config.conv_channels)
        self.layer_list = []
        residual_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
        for i in range(config.n_layers):
            layer = EncoderLayer(config.hidden_dim, config.n_heads, config.ffn_dim, rng,
                                 norm_eps=config.norm_eps, residual_scale=residual_scale)
            self.register_module(f"layers.{i}", layer)
            self.layer_list.append(layer)
        self.final_norm = RmsNorm(config.hidden_dim, config.norm_eps)
        self.ctc_head = Linear(config.hidden_dim, config.vocab_size, rng)
        self._pos_table = sinusoidal_positions(config.max_frames, config.hidden_dim)

    def out_length(self, t):
        return ceil_div(ceil_div(t, 2), 2)

    def forward_batch(
        self, features: Tensor, lengths: np.ndarray
    ) -> tuple[Tensor, Tensor, np.ndarray]:
        """(B, T, F) padded -> (hidden (B, T', d), log_probs (B, T', V+1), out_lengths)."""
        x = self.frontend(features, lengths)
        out_lengths = self.out_length(np.asarray(lengths))
        pos = self._pos_table[: x.shape[1]].astype(x.data.dtype)
        x = x + Tensor(np.broadcast_to(pos, x.shape))
        mask = encoder_attention_mask(out_lengths, x.shape[1])
        for layer in self.layer_list:
            x = layer(x, mask=mask)
        hidden = self.final_norm(x)
        log_probs = ops.log_softmax(self.ctc_head(hidden), axis=-1)
        return hidden, log_probs, out_lengths

    def forward(self, features: np.ndarray) -> tuple[Tensor, CtcPosteriorgram]:
        """Single utterance (T, F) -> (hidden (T', d), posteriorgram)."""
        feats = Tensor(np.asarray(features, dtype=self.param_dtype)[None])
        hidden, log_probs, out_lengths = self.forward_batch(
            feats, np.array([features.shape[0]])
        )
        t_out = int(out_lengths[0])
        return hidden[0, :t_out], CtcPosteriorgram.from_log_probs(log_probs.data[0, :t_out])


def compressor_forward(model: CtcCompressor, features: np.ndarray):
    return model.forward(features)

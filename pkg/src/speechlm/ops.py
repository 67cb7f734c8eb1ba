"""Network operations built on the autodiff tape.

Each op is a primitive with a hand-written vector-Jacobian product; all are
covered by finite-difference checks in the test suite.  Reductions over the
class axis use max-subtraction for numerical stability.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, make_node

__all__ = [
    "softmax",
    "logsumexp",
    "log_softmax",
    "silu",
    "rmsnorm",
    "embedding_lookup",
    "cross_entropy",
    "masked_fill",
    "rope",
    "rope_apply",
    "conv2d",
    "conv1d",
]

MASK_FILL = -1e9


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = make_node(y, (x,))
    if out._parents:

        def vjp(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)

        out._vjp = vjp
    return out


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    axis = _check_axis(x, axis)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    val = m + np.log(s)
    out = make_node(val if keepdims else val.squeeze(axis), (x,))
    if out._parents:
        soft = e / s

        def vjp(g):
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (soft * g_exp,)

        out._vjp = vjp
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = make_node(shifted - lse, (x,))
    if out._parents:
        soft = np.exp(shifted - lse)

        def vjp(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        out._vjp = vjp
    return out


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = make_node(x.data * sig, (x,))
    if out._parents:

        def vjp(g):
            return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

        out._vjp = vjp
    return out


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain shape {gain.shape} does not match feature dim {x.shape[-1]}")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x.data * inv
    out = make_node(normed * gain.data, (x, gain))
    if out._parents:

        def vjp(g):
            gx = gg = None
            if x.requires_grad:
                gy = g * gain.data
                gx = inv * (gy - x.data * inv * inv * np.mean(gy * x.data, axis=-1, keepdims=True))
            if gain.requires_grad:
                gg = (g * normed).reshape(-1, d).sum(axis=0)
            return gx, gg

        out._vjp = vjp
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"token ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out = make_node(table.data[ids], (table,))
    if out._parents:

        def vjp(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            return (gt,)

        out._vjp = vjp
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_index."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    keep = targets != ignore_index
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ContractError("no loss positions: every target equals ignore_index")
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= logits.shape[1]:
        raise ContractError("target id outside vocabulary")

    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(keep)[0]
    nll = -logp[rows, kept_targets]
    out = make_node(np.asarray(nll.sum() / n_keep, dtype=logits.data.dtype), (logits,))
    if out._parents:
        soft = np.exp(logp)

        def vjp(g):
            gl = np.zeros_like(logits.data)
            gl[rows] = soft[rows]
            gl[rows, kept_targets] -= 1.0
            return (gl * (g / n_keep),)

        out._vjp = vjp
    return out


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    """Keep ``x`` where mask is True, substitute ``value`` elsewhere.

    The substitution is a hard replacement, so masked positions contribute
    exactly zero gradient and zero influence on the output.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = make_node(np.where(mask, x.data, x.data.dtype.type(value)), (x,))
    if out._parents:

        def vjp(g):
            return (np.where(mask, g, 0.0),)

        out._vjp = vjp
    return out


# -- rotary positions ----------------------------------------------------------


def _rope_angles(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple:
    if head_dim % 2:
        raise ShapeError(f"rotary positions need an even head dim, got {head_dim}")
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(data: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = data[..., 0::2]
    odd = data[..., 1::2]
    out = np.empty_like(data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate channel pairs (2i, 2i+1) by pos * base^(-2i/head_dim).

    ``x`` has shape (..., T, head_dim); ``positions`` is integer-valued with
    shape broadcastable against the (..., T) axes (heads axis excluded via a
    broadcast dimension when needed).
    """
    cos, sin = _rope_angles(positions, x.shape[-1], base, x.data.dtype)
    if cos.ndim < x.ndim:  # e.g. (B, T, d/2) against (B, H, T, d)
        cos = np.expand_dims(cos, -3)
        sin = np.expand_dims(sin, -3)
    out = make_node(_rotate(x.data, cos, sin), (x,))
    if out._parents:

        def vjp(g):
            return (_rotate(g, cos, -sin),)

        out._vjp = vjp
    return out


def rope_apply(
    q: Tensor, k: Tensor, positions: np.ndarray, base: float = 10000.0
) -> tuple[Tensor, Tensor]:
    return rope(q, positions, base), rope(k, positions, base)


# -- convolutions --------------------------------------------------------------


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution. x: (B, Cin, H, W); kernel: (Cout, Cin, KH, KW)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {x.shape} vs kernel {kernel.shape}")
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    oh = _conv_out(h, kh, stride, padding)
    ow = _conv_out(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    # Patch tensor (B, Cin, KH, KW, OH, OW) via strided slices, then one matmul.
    patches = np.empty((b, cin, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols = patches.reshape(b, cin * kh * kw, oh * ow)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    val = np.matmul(kmat, cols).reshape(b, cout, oh, ow)
    if bias is not None:
        val = val + bias.data.reshape(1, cout, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = make_node(val, parents)
    if out._parents:

        def vjp(g):
            gcols = g.reshape(b, cout, oh * ow)
            gx = gk = gb = None
            if x.requires_grad:
                dcols = np.matmul(kmat.T, gcols).reshape(b, cin, kh, kw, oh, ow)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
            if kernel.requires_grad:
                gk = np.einsum("bop,bcp->oc", gcols, cols).reshape(kernel.shape)
            if bias is not None and bias.requires_grad:
                gb = gcols.sum(axis=(0, 2))
            grads = (gx, gk) if bias is None else (gx, gk, gb)
            return grads

        out._vjp = vjp
    return out


def conv1d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution. x: (B, Cin, T); kernel: (Cout, Cin, K)."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input/kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv1d channel mismatch: {x.shape} vs kernel {kernel.shape}")
    b, cin, t = x.shape
    cout, _, k = kernel.shape
    ot = _conv_out(t, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))

    patches = np.empty((b, cin, k, ot), dtype=x.data.dtype)
    for i in range(k):
        patches[:, :, i] = xp[:, :, i : i + stride * ot : stride]
    cols = patches.reshape(b, cin * k, ot)
    kmat = kernel.data.reshape(cout, cin * k)
    val = np.matmul(kmat, cols)
    if bias is not None:
        val = val + bias.data.reshape(1, cout, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = make_node(val, parents)
    if out._parents:

        def vjp(g):
            gx = gk = gb = None
            if x.requires_grad:
                dcols = np.matmul(kmat.T, g).reshape(b, cin, k, ot)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    gxp[:, :, i : i + stride * ot : stride] += dcols[:, :, i]
                gx = gxp[:, :, padding : padding + t]
            if kernel.requires_grad:
                gk = np.einsum("bop,bcp->oc", g, cols).reshape(kernel.shape)
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2))
            return (gx, gk) if bias is None else (gx, gk, gb)

        out._vjp = vjp
    return out

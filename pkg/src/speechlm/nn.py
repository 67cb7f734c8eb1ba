"""Module registry and the transformer building blocks shared by every model."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ContractError, ShapeError
from .tensor import Parameter, Tensor

class Module:
    """Minimal parameter container with dot-separated naming.

    Parameters and submodules register automatically on attribute assignment;
    iteration order is insertion order, which makes the registry (and thus
    checkpoints and optimizers) deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name.replace(".", "_"), module)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix=f"{prefix}{name}.")

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def trainable_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, p in self.named_parameters():
            if not p.frozen:
                yield name, p

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(
            p.size
            for _, p in self.named_parameters()
            if not (trainable_only and p.frozen)
        )

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            if name.startswith(prefix):
                p.freeze()

    def unfreeze(self, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            if name.startswith(prefix):
                p.unfreeze()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (fp64 is used by gradient-check oracles)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    @property
    def param_dtype(self):
        for p in self.parameters():
            return p.data.dtype
        return np.float32


class Linear(Module):
    """Bias-free projection y = x @ w, with an optional low-rank adapter.

    Default init is variance-preserving (std 1/sqrt(d_in)), so randomly
    initialized stacks transmit signal at O(1) gain; this matters when a
    barely trained network stays frozen and must still route information.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 init_std: Optional[float] = None):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        std = init_std if init_std is not None else 1.0 / np.sqrt(d_in)
        self.w = Parameter(rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32))
        object.__setattr__(self, "adapter", None)  # bound by lora.inject

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        if self.adapter is not None:
            y = y + self.adapter.delta(x)
        return y


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 init_std: float = 1.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = Parameter(rng.normal(0.0, init_std, size=(vocab_size, dim)).astype(np.float32))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding_lookup(self.table, ids)


class RmsNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.rmsnorm(x, self.gain, self.eps)


class GatedFeedForward(Module):
    """SiLU-gated feed-forward: down(silu(gate(x)) * up(x)).

    ``residual_scale`` shrinks the down-projection init so deep stacks of
    residual branches start stable."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 residual_scale: float = 1.0):
        super().__init__()
        self.w_gate = Linear(dim, hidden, rng)
        self.w_up = Linear(dim, hidden, rng)
        self.w_down = Linear(hidden, dim, rng, init_std=residual_scale / np.sqrt(hidden))

    def __call__(self, x: Tensor) -> Tensor:
        return self.w_down(ops.silu(self.w_gate(x)) * self.w_up(x))


class MultiHeadAttention(Module):
    """Self- or cross-attention over batched (B, T, dim) inputs.

    Rotary position rotation applies to queries/keys of self-attention only;
    cross-attention leaves them unrotated (encoder memory carries absolute
    sinusoidal positions instead).
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator,
                 use_rope: bool = False, rope_base: float = 10000.0,
                 residual_scale: float = 1.0):
        super().__init__()
        if dim % n_heads:
            raise ContractError(f"dim {dim} not divisible by heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        if use_rope and self.head_dim % 2:
            raise ContractError(f"rotary positions need even head dim, got {self.head_dim}")
        self.use_rope = use_rope
        self.rope_base = rope_base
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng, init_std=residual_scale / np.sqrt(dim))

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _join(self, x: Tensor) -> Tensor:
        b, h, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def __call__(
        self,
        x: Tensor,
        mask: Optional[np.ndarray] = None,
        positions: Optional[np.ndarray] = None,
        memory: Optional[Tensor] = None,
    ) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"attention expects (B, T, dim), got {x.shape}")
        source = memory if memory is not None else x
        q = self._split(self.wq(x))
        k = self._split(self.wk(source))
        v = self._split(self.wv(source))
        if self.use_rope and memory is None:
            if positions is None:
                positions = np.arange(x.shape[1])[None, :]
            q, k = ops.rope_apply(q, k, positions, self.rope_base)
        scores = (q * (1.0 / np.sqrt(self.head_dim))) @ k.transpose(0, 1, 3, 2)
        if mask is not None:
            if mask.ndim == 2:
                mask = mask[None, None]
            elif mask.ndim == 3:
                mask = mask[:, None]
            scores = ops.masked_fill(scores, mask)
        attn = ops.softmax(scores, axis=-1)
        return self.wo(self._join(attn @ v))


class EncoderLayer(Module):
    """Pre-norm bidirectional block (audio encoder, compressor, seq2seq encoder)."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, rng: np.random.Generator,
                 norm_eps: float = 1e-5, residual_scale: float = 1.0):
        super().__init__()
        self.attn_norm = RmsNorm(dim, norm_eps)
        self.attn = MultiHeadAttention(dim, n_heads, rng, use_rope=False,
                                       residual_scale=residual_scale)
        self.ffn_norm = RmsNorm(dim, norm_eps)
        self.ffn = GatedFeedForward(dim, ffn_dim, rng, residual_scale=residual_scale)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.attn_norm(x), mask=mask)
        return x + self.ffn(self.ffn_norm(x))


class DecoderLayer(Module):
    """Pre-norm causal block with rotary positions and optional cross-attention."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, rng: np.random.Generator,
                 cross_attention: bool = False, rope_base: float = 10000.0,
                 norm_eps: float = 1e-5, residual_scale: float = 1.0):
        super().__init__()
        self.attn_norm = RmsNorm(dim, norm_eps)
        self.attn = MultiHeadAttention(dim, n_heads, rng, use_rope=True, rope_base=rope_base,
                                       residual_scale=residual_scale)
        if cross_attention:
            self.cross_norm = RmsNorm(dim, norm_eps)
            self.cross = MultiHeadAttention(dim, n_heads, rng, use_rope=False,
                                            residual_scale=residual_scale)
        else:
            object.__setattr__(self, "cross", None)
        self.ffn_norm = RmsNorm(dim, norm_eps)
        self.ffn = GatedFeedForward(dim, ffn_dim, rng, residual_scale=residual_scale)

    def __call__(
        self,
        x: Tensor,
        mask: Optional[np.ndarray] = None,
        positions: Optional[np.ndarray] = None,
        memory: Optional[Tensor] = None,
        memory_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        x = x + self.attn(self.attn_norm(x), mask=mask, positions=positions)
        if self.cross is not None:
            if memory is None:
                raise ContractError("cross-attention layer called without memory")
            x = x + self.cross(self.cross_norm(x), mask=memory_mask, memory=memory)
        return x + self.ffn(self.ffn_norm(x))


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Absolute sin/cos position table of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs[: (dim - dim // 2)])
    return table.astype(dtype)


def ceil_div(a, b):
    return -(-a // b)


class ConvFrontend(Module):
    """Two 3x3 stride-2 conv2d layers over (time, feature) maps, then a linear
    projection; halves both axes twice, so time maps to ceil(ceil(T/2)/2)."""

    def __init__(self, feature_dim: int, out_dim: int, rng: np.random.Generator,
                 channels: int = 8):
        super().__init__()
        self.channels = channels
        self.feature_dim = feature_dim
        k = 1.0 / np.sqrt(9.0)
        self.kernel1 = Parameter(rng.uniform(-k, k, size=(channels, 1, 3, 3)).astype(np.float32))
        self.bias1 = Parameter(np.zeros(channels, dtype=np.float32))
        k2 = 1.0 / np.sqrt(9.0 * channels)
        self.kernel2 = Parameter(rng.uniform(-k2, k2, size=(channels, channels, 3, 3)).astype(np.float32))
        self.bias2 = Parameter(np.zeros(channels, dtype=np.float32))
        freq_out = ceil_div(ceil_div(feature_dim, 2), 2)
        self.out_proj = Linear(channels * freq_out, out_dim, rng)

    @staticmethod
    def out_length(t):
        return ceil_div(ceil_div(t, 2), 2)

    def __call__(self, features: Tensor, lengths: Optional[np.ndarray] = None) -> Tensor:
        """features: (B, T, F) -> (B, ceil(T/4), out_dim).

        With batched padded input, rows beyond each example's valid length are
        zeroed between the conv layers so outputs match the unpadded forward
        bit for bit.
        """
        if features.ndim != 3:
            raise ShapeError(f"frontend expects (B, T, F), got {features.shape}")
        b, t, f = features.shape
        x = features.reshape(b, 1, t, f)
        x = ops.silu(ops.conv2d(x, self.kernel1, self.bias1, stride=2, padding=1))
        if lengths is not None:
            x = x * _valid_rows(ceil_div(lengths, 2), x)
        x = ops.silu(ops.conv2d(x, self.kernel2, self.bias2, stride=2, padding=1))
        if lengths is not None:
            x = x * _valid_rows(ceil_div(ceil_div(lengths, 2), 2), x)
        b, c, t4, f4 = x.shape
        x = x.transpose(0, 2, 1, 3).reshape(b, t4, c * f4)
        return self.out_proj(x)


def _valid_rows(lengths: np.ndarray, x: Tensor) -> np.ndarray:
    """(B, C, T, F)-shaped 0/1 array keeping only rows t < lengths[b]."""
    t = x.shape[2]
    mask = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(x.data.dtype)
    return np.broadcast_to(mask[:, None, :, None], x.shape)


def length_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """Boolean (B, T) validity mask from per-example lengths."""
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]


def encoder_attention_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """(B, T, T) full-attention mask restricted to valid key positions."""
    valid = length_mask(lengths, t)
    return np.repeat(valid[:, None, :], t, axis=1)


def pad_stack(rows: list[np.ndarray], pad_to: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (T_i, d) arrays into (B, T_max, d) plus lengths."""
    lengths = np.array([r.shape[0] for r in rows], dtype=np.int64)
    t_max = int(pad_to or lengths.max())
    out = np.zeros((len(rows), t_max) + rows[0].shape[1:], dtype=rows[0].dtype)
    for i, r in enumerate(rows):
        out[i, : r.shape[0]] = r
    return out, lengths

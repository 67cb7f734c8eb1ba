"""Decoder-only transformer with configurable attention masks.

One implementation backs three roles: the small pretrained text LM that stays
frozen while audio conditioning is learned, the larger model trained from
scratch on subsampled audio, and (via shared layers) the seq2seq decoder.
Pre-norm blocks, RMS normalization, rotary positions, gated-SiLU feed-forward,
untied output head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import ops
from .errors import ContractError, ShapeError
from .nn import DecoderLayer, Embedding, Linear, Module, RmsNorm
from .tensor import Tensor, no_grad

# Special token ids shared by every text vocabulary in the repo.
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SOS_ID = 3
CONTENT_OFFSET = 3  # corpus content id c (>= 1) maps to LM id c + CONTENT_OFFSET


@dataclass(frozen=True)
class CausalMask:
    """Lower-triangular mask: position i may attend to j <= i."""


@dataclass(frozen=True)
class PrefixNonCausalMask:
    """Bidirectional inside the first ``prefix_len`` positions, causal after."""

    prefix_len: int


MaskSpec = Union[CausalMask, PrefixNonCausalMask]


def build_mask(spec: MaskSpec, t: int) -> np.ndarray:
    """(T, T) boolean matrix; True means the row position may attend."""
    if t < 1:
        raise ContractError(f"mask needs T >= 1, got {t}")
    mask = np.tril(np.ones((t, t), dtype=bool))
    if isinstance(spec, PrefixNonCausalMask):
        p = spec.prefix_len
        if not 0 <= p <= t:
            raise ContractError(f"prefix_len {p} outside [0, {t}]")
        mask[:p, :p] = True
    elif not isinstance(spec, CausalMask):
        raise ContractError(f"unknown mask spec {spec!r}")
    return mask


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    vocab_size: int = 48
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def validate(self) -> "DecoderConfig":
        if self.model_dim % self.n_heads:
            raise ContractError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if (self.model_dim // self.n_heads) % 2:
            raise ContractError("head_dim must be even for rotary position pairs")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass
class DecodeState:
    """Per-layer rotated key/value caches plus the next position index.

    States are immutable from the caller's perspective: every step returns a
    fresh state, so beam hypotheses sharing a prefix may share the prefix
    state but must not mutate it.
    """

    keys: list  # per layer (1, H, t, head_dim)
    values: list
    length: int

    def clone(self) -> "DecodeState":
        return DecodeState(list(self.keys), list(self.values), self.length)


class DecoderLM(Module):
    """Stack of pre-norm rotary decoder layers over externally built embeddings."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config.validate()
        self.embed = Embedding(config.vocab_size, config.model_dim, rng)
        self.layer_list = []
        residual_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
        for i in range(config.n_layers):
            layer = DecoderLayer(
                config.model_dim,
                config.n_heads,
                config.ffn_dim,
                rng,
                rope_base=config.rope_base,
                norm_eps=config.norm_eps,
                residual_scale=residual_scale,
            )
            self.register_module(f"layers.{i}", layer)
            self.layer_list.append(layer)
        self.final_norm = RmsNorm(config.model_dim, config.norm_eps)
        self.head = Linear(config.model_dim, config.vocab_size, rng)

    # -- full-sequence forward ------------------------------------------------

    def forward_batch(
        self,
        embeddings: Tensor,
        mask: np.ndarray,
        positions: Optional[np.ndarray] = None,
    ) -> Tensor:
        """(B, T, d) embeddings with a (B, T, T) or (T, T) boolean mask."""
        if embeddings.ndim != 3:
            raise ShapeError(f"expected (B, T, d) embeddings, got {embeddings.shape}")
        t = embeddings.shape[1]
        if mask.shape[-1] != t or mask.shape[-2] != t:
            raise ContractError(f"mask shape {mask.shape} does not match T={t}")
        x = embeddings
        for layer in self.layer_list:
            x = layer(x, mask=mask, positions=positions)
        return self.head(self.final_norm(x))

    def forward(self, embeddings: Tensor, mask_spec: MaskSpec,
                positions: Optional[np.ndarray] = None) -> Tensor:
        """Single sequence (T, d) -> logits (T, vocab)."""
        if embeddings.ndim != 2:
            raise ShapeError(f"expected (T, d) embeddings, got {embeddings.shape}")
        t = embeddings.shape[0]
        mask = build_mask(mask_spec, t)
        pos = positions[None] if positions is not None else None
        logits = self.forward_batch(embeddings.reshape(1, t, -1), mask, pos)
        return logits[0]

    def forward_tokens(self, ids: np.ndarray, mask_spec: MaskSpec = CausalMask()) -> Tensor:
        return self.forward(self.embed(np.asarray(ids)), mask_spec)

    # -- incremental decoding ---------------------------------------------------

    def empty_state(self) -> DecodeState:
        return DecodeState(keys=[None] * len(self.layer_list),
                           values=[None] * len(self.layer_list), length=0)

    def _extend(self, state: DecodeState, new_embeddings: Tensor,
                new_mask: np.ndarray) -> tuple[Tensor, DecodeState]:
        """Run ``n`` new positions against the cache.

        ``new_mask`` is (n, length + n) over [cached keys | new keys].
        Returns logits for the new positions and the extended state.
        """
        n = new_embeddings.shape[0]
        positions = (state.length + np.arange(n))[None]
        x = new_embeddings.reshape(1, n, -1)
        new_keys, new_values = [], []
        mask4 = new_mask[None, None]
        for li, layer in enumerate(self.layer_list):
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
            ctx = ops.softmax(scores, axis=-1) @ v_all
            x = x + attn.wo(attn._join(ctx))
            x = x + layer.ffn(layer.ffn_norm(x))
        logits = self.head(self.final_norm(x))[0]
        return logits, DecodeState(new_keys, new_values, state.length + n)

    def prefill(self, embeddings: Tensor, mask_spec: MaskSpec) -> tuple[Tensor, DecodeState]:
        """Consume a whole prefix; returns last-position logits and the cache."""
        if embeddings.ndim != 2:
            raise ShapeError(f"prefill expects (T, d), got {embeddings.shape}")
        with no_grad():
            mask = build_mask(mask_spec, embeddings.shape[0])
            logits, state = self._extend(self.empty_state(), embeddings, mask)
        return logits[-1], state

    def incremental_forward(self, state: DecodeState,
                            new_embedding: Tensor) -> tuple[Tensor, DecodeState]:
        """Feed one position; equals full forward's last-row logits within fp noise."""
        if new_embedding.ndim != 1:
            raise ShapeError(f"expected a single (d,) embedding, got {new_embedding.shape}")
        with no_grad():
            mask = np.ones((1, state.length + 1), dtype=bool)
            logits, new_state = self._extend(state, new_embedding.reshape(1, -1), mask)
        return logits[0], new_state


def shift_tokens(content_ids) -> np.ndarray:
    """Corpus content ids (>= 1) to LM ids."""
    arr = np.asarray(list(content_ids), dtype=np.int64)
    return arr + CONTENT_OFFSET


def unshift_tokens(lm_ids) -> list[int]:
    """LM ids back to corpus content ids; non-content ids map to 0."""
    out = []
    for t in np.asarray(list(lm_ids), dtype=np.int64):
        c = int(t) - CONTENT_OFFSET
        out.append(c if c >= 1 else 0)
    return out


def lm_sequence(target_tokens) -> tuple[np.ndarray, np.ndarray]:
    """Next-token training pair for text pretraining: BOS + shifted targets."""
    shifted = shift_tokens(target_tokens)
    inputs = np.concatenate([[BOS_ID], shifted])
    labels = np.concatenate([shifted, [EOS_ID]])
    return inputs, labels


def lm_log_prob(model: DecoderLM, target_tokens) -> float:
    """Teacher-forced log P(tokens, EOS | BOS) under the text LM."""
    inputs, labels = lm_sequence(target_tokens)
    with no_grad():
        logits = model.forward_tokens(inputs)
        logp = ops.log_softmax(logits, axis=-1).data
    return float(logp[np.arange(len(labels)), labels].sum())

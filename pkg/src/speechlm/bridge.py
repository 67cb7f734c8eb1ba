"""Everything that connects acoustics to the language model: the audio
encoder, the jointly trained convolution subsampler, the from-scratch conv
frontend, prompt templating, and prefix assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import ops
from .decoder import BOS_ID, CausalMask, MaskSpec, PrefixNonCausalMask
from .errors import ConfigError, ContractError, ShapeError
from .nn import (
    ConvFrontend,
    EncoderLayer,
    Linear,
    Module,
    RmsNorm,
    ceil_div,
    encoder_attention_mask,
    sinusoidal_positions,
)
from .tensor import Parameter, Tensor, concat

# -- prompt templating -----------------------------------------------------

# Word-level toy vocabulary for prompts; ids sit above the content range.
PROMPT_WORD_BASE = 35
PROMPT_WORDS = (
    "audio",
    "=>",
    "English",
    "translate",
    "the",
    "into",
    "transcribe",
    "lang0",
    "lang1",
    "lang2",
    "lang3",
    "lang4",
)
PROMPT_WORD_IDS = {w: PROMPT_WORD_BASE + i for i, w in enumerate(PROMPT_WORDS)}

TRAIN_PROMPTS = (
    "audio => English",
    "translate the audio into English",
    "translate [source] audio into English",
    "transcribe the audio into English",
)
EVAL_PROMPT = "translate the audio into English"


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    token_ids: tuple[int, ...]


def tokenize_prompt(text: str, language_id: int) -> PromptTemplate:
    ids = []
    for word in text.split():
        if word == "[source]":
            word = f"lang{language_id}"
        if word not in PROMPT_WORD_IDS:
            raise ConfigError(f"prompt word {word!r} not in the prompt vocabulary")
        ids.append(PROMPT_WORD_IDS[word])
    return PromptTemplate(text=text, token_ids=tuple(ids))


def sample_prompt(rng: np.random.Generator, language_id: int, training: bool) -> PromptTemplate:
    """Training draws uniformly from the template list; evaluation always uses
    the fixed template."""
    if language_id >= 5:
        raise ConfigError("prompt vocabulary supports at most 5 languages")
    text = TRAIN_PROMPTS[int(rng.integers(len(TRAIN_PROMPTS)))] if training else EVAL_PROMPT
    return tokenize_prompt(text, language_id)


# -- audio encoder -----------------------------------------------------------


@dataclass(frozen=True)
class AudioEncoderConfig:
    input_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    output_dim: int = 128  # must equal the LM model_dim
    norm_eps: float = 1e-5
    max_len: int = 1024


class AudioEncoder(Module):
    """Small randomly initialized transformer mapping compressed acoustic
    vectors into the LM embedding space.

    Full self-attention (no causal mask) with absolute sinusoidal positions,
    then a linear projection to the LM dimension.
    """

    def __init__(self, config: AudioEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.layer_list = []
        residual_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
        for i in range(config.n_layers):
            layer = EncoderLayer(config.input_dim, config.n_heads, config.ffn_dim, rng,
                                 norm_eps=config.norm_eps, residual_scale=residual_scale)
            self.register_module(f"layers.{i}", layer)
            self.layer_list.append(layer)
        self.final_norm = RmsNorm(config.input_dim, config.norm_eps)
        self.out_proj = Linear(config.input_dim, config.output_dim, rng)
        self._pos_table = sinusoidal_positions(config.max_len, config.input_dim)

    def forward_batch(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        """(B, T, input_dim) padded -> (B, T, output_dim)."""
        if x.ndim != 3:
            raise ShapeError(f"audio encoder expects (B, T, d), got {x.shape}")
        pos = self._pos_table[: x.shape[1]].astype(x.data.dtype)
        x = x + Tensor(np.broadcast_to(pos, x.shape))
        mask = encoder_attention_mask(lengths, x.shape[1])
        for layer in self.layer_list:
            x = layer(x, mask=mask)
        return self.out_proj(self.final_norm(x))

    def __call__(self, compressed: Tensor) -> Tensor:
        """Single utterance (T'', input_dim) -> (T'', output_dim)."""
        if compressed.ndim != 2 or compressed.shape[0] < 1:
            raise ContractError(f"need at least one audio frame, got {compressed.shape}")
        t = compressed.shape[0]
        out = self.forward_batch(compressed.reshape(1, t, -1), np.array([t]))
        return out.reshape(t, -1)


def encode_audio(model: AudioEncoder, compressed_hidden: Tensor) -> Tensor:
    return model(compressed_hidden)


# -- convolution subsampler (jointly trained alternative to the compressor) --


class ConvSubsampler(Module):
    """2 conv2d + 3 conv1d layers, each stride 2: 32x total time reduction."""

    jointly_trained = True

    def __init__(self, feature_dim: int, out_dim: int, rng: np.random.Generator,
                 channels: int = 8):
        super().__init__()
        self.frontend = ConvFrontend(feature_dim, channels * 4, rng, channels=channels)
        width = channels * 4
        self.width = width
        k = 1.0 / np.sqrt(3.0 * width)
        for i in range(3):
            kernel = Parameter(rng.uniform(-k, k, size=(width, width, 3)).astype(np.float32))
            bias = Parameter(np.zeros(width, dtype=np.float32))
            setattr(self, f"kernel{i}", kernel)
            setattr(self, f"bias{i}", bias)
        self.out_proj = Linear(width, out_dim, rng)

    @staticmethod
    def out_length(t):
        n = np.asarray(t)
        for _ in range(5):
            n = ceil_div(n, 2)
        return n if n.ndim else int(n)

    def forward_batch(self, features: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        x = self.frontend(features, lengths)  # (B, ceil(T/4), width)
        lens = ceil_div(ceil_div(np.asarray(lengths), 2), 2)
        x = x.transpose(0, 2, 1)  # (B, width, T')
        for i in range(3):
            x = ops.silu(
                ops.conv1d(x, getattr(self, f"kernel{i}"), getattr(self, f"bias{i}"),
                           stride=2, padding=1)
            )
            lens = ceil_div(lens, 2)
            valid = (np.arange(x.shape[2])[None] < lens[:, None]).astype(x.data.dtype)
            x = x * np.broadcast_to(valid[:, None, :], x.shape)
        x = x.transpose(0, 2, 1)
        return self.out_proj(x), lens

    def __call__(self, features: np.ndarray) -> Tensor:
        """Single utterance (T, F) -> (ceil(T/32), out_dim)."""
        t = features.shape[0]
        out, lens = self.forward_batch(
            Tensor(np.asarray(features, dtype=self.param_dtype)[None]), np.array([t])
        )
        return out[0, : int(lens[0])]


def conv_subsample(model: ConvSubsampler, features: np.ndarray) -> Tensor:
    return model(features)


# -- from-scratch frontend -----------------------------------------------------


class ScratchFrontend(Module):
    """Conv frontend (4x reduction) straight to the decoder dimension; the
    decoder appends its learned start-of-generation embedding after the
    acoustic rows."""

    def __init__(self, feature_dim: int, model_dim: int, rng: np.random.Generator,
                 channels: int = 8):
        super().__init__()
        self.frontend = ConvFrontend(feature_dim, model_dim, rng, channels=channels)

    def forward_batch(self, features: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        return self.frontend(features, lengths), ceil_div(ceil_div(np.asarray(lengths), 2), 2)

    def __call__(self, features: np.ndarray) -> Tensor:
        t = features.shape[0]
        out, lens = self.forward_batch(
            Tensor(np.asarray(features, dtype=self.param_dtype)[None]), np.array([t])
        )
        return out[0, : int(lens[0])]


# -- prefix assembly -------------------------------------------------------------


@dataclass
class PrefixAssembly:
    """Prompt ⊕ audio ⊕ BOS ⊕ shifted-target embedding sequence.

    ``labels`` carries the prediction target per position (-1 outside loss
    positions); ``loss_mask`` is True exactly on the len(target) positions
    that predict target tokens (EOS included).
    """

    embeddings: Tensor  # (P + A + N, model_dim)
    mask_spec: MaskSpec
    loss_mask: np.ndarray
    labels: np.ndarray
    prefix_len: int  # P + A


def assemble_prefix(
    embedding,
    prompt_ids,
    audio_embeds: Tensor,
    target_lm_ids,
    mask_variant: str = "causal",
    eos_id: int = 2,
    use_bos: bool = True,
) -> PrefixAssembly:
    """Build the training/teacher-forcing sequence for one utterance.

    ``target_lm_ids`` must end with EOS; ``audio_embeds`` is (A >= 1, d).
    With ``use_bos`` False the first target is predicted at the last audio
    position instead of a BOS slot.
    """
    prompt_ids = np.asarray(list(prompt_ids), dtype=np.int64)
    target = np.asarray(list(target_lm_ids), dtype=np.int64)
    if len(target) < 1 or target[-1] != eos_id:
        raise ContractError("target_tokens must end with EOS during training")
    if audio_embeds.ndim != 2 or audio_embeds.shape[0] < 1:
        raise ContractError("zero-length audio prefix (compressor guarantees >= 1 frame)")

    p_len = len(prompt_ids)
    a_len = audio_embeds.shape[0]
    n_len = len(target)
    text_ids = np.concatenate([[BOS_ID], target[:-1]]) if use_bos else target[:-1]
    parts = []
    if p_len:
        parts.append(embedding(prompt_ids))
    parts.append(audio_embeds)
    if len(text_ids):
        parts.append(embedding(text_ids))
    embeddings = concat(parts, axis=0)

    total = embeddings.shape[0]
    labels = np.full(total, -1, dtype=np.int64)
    first_loss = p_len + a_len if use_bos else p_len + a_len - 1
    labels[first_loss : first_loss + n_len] = target
    loss_mask = labels != -1

    prefix_len = p_len + a_len
    if mask_variant == "prefix":
        spec: MaskSpec = PrefixNonCausalMask(prefix_len)
    elif mask_variant == "causal":
        spec = CausalMask()
    else:
        raise ConfigError(f"unknown mask variant {mask_variant!r}")
    return PrefixAssembly(
        embeddings=embeddings,
        mask_spec=spec,
        loss_mask=loss_mask,
        labels=labels,
        prefix_len=prefix_len,
    )

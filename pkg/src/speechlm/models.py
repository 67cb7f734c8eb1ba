"""Composite task models: the frozen-LM speech model (audio prefix + text LM)
and the from-scratch decoder-only speech model.

Training uses padded batches.  Per-example semantic positions and validity
masks make the padded forward agree with the single-example forward exactly,
which is covered by equivalence tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .bridge import (
    AudioEncoder,
    ConvSubsampler,
    PrefixAssembly,
    ScratchFrontend,
    assemble_prefix,
    sample_prompt,
)
from .corpus import CorpusExample
from .ctc import CompressionMode, CtcCompressor, compress
from .decoder import BOS_ID, CausalMask, DecoderLM, EOS_ID, PrefixNonCausalMask, SOS_ID, shift_tokens
from .errors import ConfigError, ContractError
from .nn import Module, pad_stack
from .tensor import Tensor, no_grad


@dataclass
class PackedBatch:
    """Padded multi-utterance forward inputs for a decoder stack."""

    embeddings: Tensor  # (B, T, d)
    positions: np.ndarray  # (B, T) semantic position ids
    attn_mask: np.ndarray  # (B, T, T) boolean
    labels: np.ndarray  # (B, T); -1 outside loss positions


def _pack_masks(
    seg_valid: np.ndarray,
    positions: np.ndarray,
    prefix_lens: Optional[np.ndarray],
) -> np.ndarray:
    """Attention mask from validity + semantic positions.

    Valid query i may attend valid key j when sem[j] <= sem[i], or when both
    fall inside the example's bidirectional prefix.
    """
    b, t = seg_valid.shape
    sem_q = positions[:, :, None]
    sem_k = positions[:, None, :]
    allowed = sem_k <= sem_q
    if prefix_lens is not None:
        pl = prefix_lens[:, None, None]
        allowed |= (sem_q < pl) & (sem_k < pl)
    allowed &= seg_valid[:, :, None] & seg_valid[:, None, :]
    return allowed


def pack_prefix_batch(
    embedding,
    prompt_ids_list: list[np.ndarray],
    audio_embeds: Tensor,
    audio_lens: np.ndarray,
    targets_list: list[np.ndarray],
    mask_variant: str,
    use_bos: bool = True,
) -> PackedBatch:
    """Batched analogue of assemble_prefix over a fixed segment layout
    [prompt pad | audio pad | BOS + shifted targets pad]."""
    b = len(prompt_ids_list)
    if not use_bos and b > 1:
        raise ContractError(
            "packed batches require the BOS separator; the no-BOS ablation is "
            "single-example only (see assemble_prefix)"
        )
    p_lens = np.array([len(p) for p in prompt_ids_list])
    n_lens = np.array([len(t) for t in targets_list])  # EOS included
    p_max = int(p_lens.max()) if b else 0
    a_max = audio_embeds.shape[1]
    bos_extra = 1 if use_bos else 0
    text_lens = n_lens - 1 + bos_extra
    text_max = int(text_lens.max())

    prompt_mat = np.zeros((b, p_max), dtype=np.int64)
    text_mat = np.zeros((b, text_max), dtype=np.int64)
    for i, (p_ids, tgt) in enumerate(zip(prompt_ids_list, targets_list)):
        prompt_mat[i, : len(p_ids)] = p_ids
        row = np.concatenate([[BOS_ID], tgt[:-1]]) if use_bos else tgt[:-1]
        text_mat[i, : len(row)] = row

    parts = []
    if p_max:
        parts.append(embedding(prompt_mat))
    parts.append(audio_embeds)
    parts.append(embedding(text_mat))
    from .tensor import concat

    embeddings = concat(parts, axis=1)
    t_total = embeddings.shape[1]

    col = np.arange(t_total)[None, :]
    positions = np.zeros((b, t_total), dtype=np.int64)
    valid = np.zeros((b, t_total), dtype=bool)
    labels = np.full((b, t_total), -1, dtype=np.int64)
    for i in range(b):
        p, a, n = int(p_lens[i]), int(audio_lens[i]), int(n_lens[i])
        valid[i, :p] = True
        valid[i, p_max : p_max + a] = True
        valid[i, p_max + a_max : p_max + a_max + text_lens[i]] = True
        positions[i, :p_max] = np.minimum(col[0, :p_max], max(p - 1, 0))
        positions[i, p_max : p_max + a_max] = p + np.minimum(np.arange(a_max), max(a - 1, 0))
        positions[i, p_max + a_max :] = p + a + np.minimum(np.arange(t_total - p_max - a_max),
                                                           max(int(text_lens[i]) - 1, 0))
        first_loss = p_max + a_max if use_bos else p_max + a - 1
        labels[i, first_loss : first_loss + n] = targets_list[i]
    prefix_lens = (p_lens + audio_lens) if mask_variant == "prefix" else None
    attn_mask = _pack_masks(valid, positions, prefix_lens)
    return PackedBatch(embeddings=embeddings, positions=positions,
                       attn_mask=attn_mask, labels=labels)


def packed_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    b, t, v = logits.shape
    return ops.cross_entropy(logits.reshape(b * t, v), labels.reshape(-1), ignore_index=-1)


@dataclass(frozen=True)
class SpeechLmVariantConfig:
    """Knobs distinguishing the frozen-LM experiment variants."""

    audio_frontend: str = "ctc"  # "ctc" (pretrained compressor) or "conv" (joint subsampler)
    compression: CompressionMode = CompressionMode.FRAME_AVERAGE
    drop_blank_runs: bool = False
    mask_variant: str = "causal"  # "causal" or "prefix"
    use_bos: bool = True

    def validate(self) -> "SpeechLmVariantConfig":
        if self.audio_frontend not in ("ctc", "conv"):
            raise ConfigError(f"unknown audio frontend {self.audio_frontend!r}")
        if self.mask_variant not in ("causal", "prefix"):
            raise ConfigError(f"unknown mask variant {self.mask_variant!r}")
        return self


class AudioPrefixLM(Module):
    """Frozen text LM conditioned on compressed acoustic embeddings.

    Stage 1 trains the audio encoder (plus the subsampler when it replaces the
    pretrained compressor); stage 2 adds low-rank adapters on the LM.
    """

    def __init__(
        self,
        lm: DecoderLM,
        audio_encoder: AudioEncoder,
        variant: SpeechLmVariantConfig,
        compressor: Optional[CtcCompressor] = None,
        subsampler: Optional[ConvSubsampler] = None,
    ):
        super().__init__()
        variant.validate()
        if variant.audio_frontend == "ctc" and compressor is None:
            raise ConfigError("ctc frontend requires a compressor")
        if variant.audio_frontend == "conv" and subsampler is None:
            raise ConfigError("conv frontend requires a subsampler")
        self.variant = variant
        self.lm = lm
        self.audio_encoder = audio_encoder
        if compressor is not None:
            self.compressor = compressor
        else:
            object.__setattr__(self, "compressor", None)
        if subsampler is not None:
            self.subsampler = subsampler
        else:
            object.__setattr__(self, "subsampler", None)
        # The compressor is pretrain-then-freeze, so its per-utterance outputs
        # are constants; cache them across training steps (keyed by example id).
        object.__setattr__(self, "_compress_cache", {})

    # -- acoustic side -------------------------------------------------------

    def compress_example(self, features: np.ndarray, cache_key=None) -> np.ndarray:
        """Frozen compressor path for one utterance -> (A, input_dim) array."""
        if cache_key is not None and cache_key in self._compress_cache:
            return self._compress_cache[cache_key]
        with no_grad():
            hidden, post = self.compressor.forward(features)
            compressed = compress(hidden, post, self.variant.compression,
                                  self.variant.drop_blank_runs)
        if cache_key is not None:
            self._compress_cache[cache_key] = compressed.data
        return compressed.data

    def audio_embeddings_batch(self, examples: list[CorpusExample]) -> tuple[Tensor, np.ndarray]:
        """(B, A_max, lm_dim) trainable audio embeddings plus lengths."""
        dtype = self.audio_encoder.param_dtype
        if self.variant.audio_frontend == "ctc":
            rows = [self.compress_example(ex.features, cache_key=ex.id or None)
                    for ex in examples]
            padded, lens = pad_stack(rows)
            return self.audio_encoder.forward_batch(Tensor(padded, dtype=dtype), lens), lens
        feats, f_lens = pad_stack([ex.features for ex in examples])
        sub, lens = self.subsampler.forward_batch(Tensor(feats, dtype=dtype), f_lens)
        return self.audio_encoder.forward_batch(sub, lens), lens

    # -- losses ----------------------------------------------------------------

    def batch_loss(self, examples: list[CorpusExample],
                   prompt_rng: Optional[np.random.Generator] = None,
                   training: bool = True) -> Tensor:
        prompts = []
        for ex in examples:
            rng = prompt_rng if prompt_rng is not None else np.random.default_rng(0)
            prompts.append(np.array(sample_prompt(rng, ex.language_id, training).token_ids,
                                    dtype=np.int64))
        targets = [np.concatenate([shift_tokens(ex.target_tokens), [EOS_ID]])
                   for ex in examples]
        audio, audio_lens = self.audio_embeddings_batch(examples)
        batch = pack_prefix_batch(self.lm.embed, prompts, audio, audio_lens, targets,
                                  self.variant.mask_variant, self.variant.use_bos)
        logits = self.lm.forward_batch(batch.embeddings, batch.attn_mask, batch.positions)
        return packed_cross_entropy(logits, batch.labels)

    def assemble_example(self, example: CorpusExample,
                         prompt_rng: Optional[np.random.Generator] = None,
                         training: bool = False) -> PrefixAssembly:
        """Single-utterance assembly (evaluation prompt when not training)."""
        rng = prompt_rng if prompt_rng is not None else np.random.default_rng(0)
        prompt = sample_prompt(rng, example.language_id, training)
        if self.variant.audio_frontend == "ctc":
            compressed = Tensor(self.compress_example(example.features))
        else:
            compressed = self.subsampler(example.features)
        audio = self.audio_encoder(compressed)
        target = np.concatenate([shift_tokens(example.target_tokens), [EOS_ID]])
        return assemble_prefix(self.lm.embed, prompt.token_ids, audio, target,
                               self.variant.mask_variant, use_bos=self.variant.use_bos)

    def decode_prefix(self, example: CorpusExample) -> tuple[Tensor, object]:
        """Prefix embeddings (prompt ⊕ audio ⊕ BOS) and mask spec for decoding."""
        with no_grad():
            prompt = sample_prompt(np.random.default_rng(0), example.language_id, training=False)
            if self.variant.audio_frontend == "ctc":
                compressed = Tensor(self.compress_example(example.features))
            else:
                compressed = self.subsampler(example.features)
            audio = self.audio_encoder(compressed)
            from .tensor import concat

            parts = [self.lm.embed(np.array(prompt.token_ids, dtype=np.int64)), audio]
            if self.variant.use_bos:
                parts.append(self.lm.embed(np.array([BOS_ID])))
            embeddings = concat(parts, axis=0)
        prefix_len = len(prompt.token_ids) + audio.shape[0]
        spec = PrefixNonCausalMask(prefix_len) if self.variant.mask_variant == "prefix" else CausalMask()
        return embeddings, spec


class ScratchSpeechModel(Module):
    """Randomly initialized decoder-only model consuming subsampled audio
    frames, a start marker, then generating text with a causal mask."""

    def __init__(self, decoder: DecoderLM, frontend: ScratchFrontend):
        super().__init__()
        self.decoder = decoder
        self.frontend = frontend

    def scratch_frontend(self, features: np.ndarray) -> Tensor:
        """(T, F) -> (ceil(T/4) + 1, model_dim); start marker appended."""
        from .tensor import concat

        audio = self.frontend(features)
        sos = self.decoder.embed(np.array([SOS_ID]))
        return concat([audio, sos], axis=0)

    def batch_loss(self, examples: list[CorpusExample]) -> Tensor:
        feats, f_lens = pad_stack([ex.features for ex in examples])
        audio, a_lens = self.frontend.forward_batch(
            Tensor(feats, dtype=self.decoder.param_dtype), f_lens)
        targets = [np.concatenate([shift_tokens(ex.target_tokens), [EOS_ID]])
                   for ex in examples]
        b = len(examples)
        n_lens = np.array([len(t) for t in targets])
        a_max = audio.shape[1]
        text_max = int(n_lens.max())  # SOS + targets[:-1]

        text_mat = np.zeros((b, text_max), dtype=np.int64)
        for i, tgt in enumerate(targets):
            text_mat[i, 0] = SOS_ID
            text_mat[i, 1 : len(tgt)] = tgt[:-1]
        from .tensor import concat

        embeddings = concat([audio, self.decoder.embed(text_mat)], axis=1)
        t_total = embeddings.shape[1]
        positions = np.zeros((b, t_total), dtype=np.int64)
        valid = np.zeros((b, t_total), dtype=bool)
        labels = np.full((b, t_total), -1, dtype=np.int64)
        for i in range(b):
            a, n = int(a_lens[i]), int(n_lens[i])
            valid[i, :a] = True
            valid[i, a_max : a_max + n] = True
            positions[i, :a_max] = np.minimum(np.arange(a_max), a - 1)
            positions[i, a_max :] = a + np.minimum(np.arange(t_total - a_max), n - 1)
            labels[i, a_max : a_max + n] = targets[i]
        attn_mask = _pack_masks(valid, positions, None)
        logits = self.decoder.forward_batch(embeddings, attn_mask, positions)
        return packed_cross_entropy(logits, labels)

    def decode_prefix(self, example: CorpusExample) -> tuple[Tensor, object]:
        with no_grad():
            embeddings = self.scratch_frontend(example.features)
        return embeddings, CausalMask()


class PrefixLMScorer:
    """Beam-search scorer over a decoder LM given prefix embeddings.

    The prefix (embeddings, mask spec) is consumed once; each advance feeds
    one token embedding through the key/value cache.  States returned by the
    decoder are fresh objects, so hypotheses branching from a shared prefix
    never interfere.
    """

    def __init__(self, lm: DecoderLM):
        self.lm = lm
        self.eos_id = EOS_ID
        self.vocab_size = lm.config.vocab_size

    def initial(self, prefix):
        embeddings, mask_spec = prefix
        logits, state = self.lm.prefill(embeddings, mask_spec)
        return state, ops.log_softmax(logits, axis=-1).data

    def advance(self, state, token: int):
        emb = self.lm.embed(np.array([token]))
        logits, new_state = self.lm.incremental_forward(state, emb.reshape(-1))
        return new_state, ops.log_softmax(logits, axis=-1).data

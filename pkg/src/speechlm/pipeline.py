"""End-to-end stages behind the CLI: data generation, pretraining, variant
training, decoding, rescoring, evaluation, and the full experiment matrix.

Artifacts land under an output directory:

    corpus/{train,valid,test}/       synthetic corpus splits
    checkpoints/lm.ckpt              pretrained text LM ("lm." prefix)
    checkpoints/compressor.ckpt      pretrained CTC compressor ("compressor.")
    checkpoints/<variant>/...        per-variant training checkpoints
    decode/<variant>.jsonl           n-best decode output
    results.json / results.txt       experiment-matrix table
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .bridge import AudioEncoder, AudioEncoderConfig, ConvSubsampler, ScratchFrontend
from .checkpoint import load_checkpoint, load_into_model, model_entries, save_checkpoint
from .config import ExperimentConfig, VARIANTS, validate_variant, variant_settings
from .corpus import CorpusExample, GeneratorConfig, generate_corpus, read_corpus, write_corpus
from .ctc import CompressionMode, CtcCompressor, CtcCompressorConfig, ctc_loss
from .decoder import (
    BOS_ID,
    CausalMask,
    DecoderConfig,
    DecoderLM,
    EOS_ID,
    lm_log_prob,
    shift_tokens,
    unshift_tokens,
)
from .decoding import beam_search
from .errors import ConfigError, DependencyError
from .lora import LoraConfig, inject, param_count as lora_param_count
from .metrics import corpus_bleu, token_accuracy
from .models import AudioPrefixLM, PackedBatch, ScratchSpeechModel, SpeechLmVariantConfig, packed_cross_entropy
from .nn import Module, length_mask
from .seq2seq import EncDecConfig, JointScorer, Seq2SeqModel, Seq2SeqScorer, rescore_nbest
from .tensor import Tensor, no_grad
from .trainer import StageConfig, TrainResult, apply_freeze_plan, run_training

SPLITS = ("train", "valid", "test")


def _key_ints(key) -> list[int]:
    import hashlib

    out = []
    for item in key:
        if isinstance(item, str):
            digest = hashlib.blake2s(item.encode("utf-8"), digest_size=8).digest()
            out.append(int.from_bytes(digest, "little"))
        else:
            out.append(int(item))
    return out


def _derived_seed(*key) -> int:
    return int(np.random.SeedSequence(_key_ints(key)).generate_state(1)[0])


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_key_ints(key)))


# -- paths -------------------------------------------------------------------


def corpus_dir(out: Path, split: str) -> Path:
    return Path(out) / "corpus" / split


def ckpt_path(out: Path, name: str) -> Path:
    return Path(out) / "checkpoints" / name


def decode_path(out: Path, variant: str) -> Path:
    return Path(out) / "decode" / f"{variant}.jsonl"


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise DependencyError(f"missing {path}; run `{producer}` first")
    return Path(path)


# -- data ---------------------------------------------------------------------


def generator_config(cfg: ExperimentConfig) -> GeneratorConfig:
    d = cfg.data
    return GeneratorConfig(
        source_vocab_size=d.source_vocab_size,
        target_vocab_size=d.target_vocab_size,
        feature_dim=d.feature_dim,
        duration_range=tuple(d.duration_range),
        noise_sigma=d.noise_sigma,
        utterance_length_range=tuple(d.utterance_length_range),
        seed=cfg.seed,
        num_languages=d.num_languages,
    )


def cmd_gen_data(cfg: ExperimentConfig, out: Path, log: Callable = print) -> dict:
    gen = generator_config(cfg)
    sizes = {"train": cfg.data.train_size, "valid": cfg.data.valid_size,
             "test": cfg.data.test_size}
    for split in SPLITS:
        examples = generate_corpus(gen, sizes[split], split=split)
        write_corpus(examples, corpus_dir(out, split))
        log(f"[gen-data] wrote {len(examples)} examples to {corpus_dir(out, split)}")
    return {"sizes": sizes}


def load_split(out: Path, split: str) -> list[CorpusExample]:
    return read_corpus(_require(corpus_dir(out, split), "speechlm gen-data"))


# -- model builders ----------------------------------------------------------------


def build_lm(cfg: ExperimentConfig) -> DecoderLM:
    c = cfg.lm
    config = DecoderConfig(n_layers=c.n_layers, n_heads=c.n_heads, model_dim=c.model_dim,
                           ffn_dim=c.ffn_dim, vocab_size=c.vocab_size)
    return DecoderLM(config, _rng(cfg.seed, "lm-init"))


def build_compressor(cfg: ExperimentConfig) -> CtcCompressor:
    c = cfg.compressor
    config = CtcCompressorConfig(
        feature_dim=cfg.data.feature_dim, hidden_dim=c.hidden_dim, n_layers=c.n_layers,
        n_heads=c.n_heads, ffn_dim=c.ffn_dim, vocab_size=cfg.data.source_vocab_size,
        conv_channels=c.conv_channels,
    )
    return CtcCompressor(config, _rng(cfg.seed, "compressor-init"))


def build_audio_encoder(cfg: ExperimentConfig) -> AudioEncoder:
    a = cfg.audio_encoder
    config = AudioEncoderConfig(
        input_dim=cfg.compressor.hidden_dim, n_layers=a.n_layers, n_heads=a.n_heads,
        ffn_dim=a.ffn_dim, output_dim=cfg.lm.model_dim,
    )
    return AudioEncoder(config, _rng(cfg.seed, "audio-encoder-init"))


def build_prefix_model(cfg: ExperimentConfig, variant: str) -> AudioPrefixLM:
    settings = variant_settings(variant)
    vconf = SpeechLmVariantConfig(
        audio_frontend=settings["frontend"],
        compression=CompressionMode(settings["compression"] or "frame_average"),
        drop_blank_runs=cfg.compressor.drop_blank_runs,
        mask_variant=settings["mask"],
        use_bos=cfg.decoding.use_bos,
    )
    lm = build_lm(cfg)
    audio_encoder = build_audio_encoder(cfg)
    compressor = build_compressor(cfg) if settings["frontend"] == "ctc" else None
    subsampler = None
    if settings["frontend"] == "conv":
        subsampler = ConvSubsampler(cfg.data.feature_dim, cfg.compressor.hidden_dim,
                                    _rng(cfg.seed, "subsampler-init"))
    return AudioPrefixLM(lm, audio_encoder, vconf, compressor=compressor,
                         subsampler=subsampler)


def build_scratch_model(cfg: ExperimentConfig) -> ScratchSpeechModel:
    s = cfg.scratch
    decoder = DecoderLM(
        DecoderConfig(n_layers=s.n_layers, n_heads=s.n_heads, model_dim=s.model_dim,
                      ffn_dim=s.ffn_dim, vocab_size=cfg.lm.vocab_size),
        _rng(cfg.seed, "scratch-init"),
    )
    frontend = ScratchFrontend(cfg.data.feature_dim, s.model_dim,
                               _rng(cfg.seed, "scratch-frontend-init"))
    return ScratchSpeechModel(decoder, frontend)


def build_seq2seq_model(cfg: ExperimentConfig) -> Seq2SeqModel:
    s = cfg.seq2seq
    config = EncDecConfig(
        enc_layers=s.enc_layers, dec_layers=s.dec_layers, model_dim=s.model_dim,
        n_heads=s.n_heads, ffn_dim=s.ffn_dim, vocab_size=cfg.lm.vocab_size,
        ctc_vocab_size=cfg.data.source_vocab_size, feature_dim=cfg.data.feature_dim,
        ctc_weight_train=s.ctc_weight_train,
    )
    return Seq2SeqModel(config, _rng(cfg.seed, "seq2seq-init"))


def lora_config(cfg: ExperimentConfig) -> LoraConfig:
    return LoraConfig(rank=cfg.lora.rank, alpha=cfg.lora.alpha,
                      targets=tuple(cfg.lora.targets), init_std=cfg.lora.init_std)


def _prefixed(entries: dict, prefix: str) -> dict:
    return {prefix + name: value for name, value in entries.items()}


def _strip_prefix(entries: dict, prefix: str) -> dict:
    return {name[len(prefix):]: value for name, value in entries.items()
            if name.startswith(prefix)}


# -- text LM pretraining -------------------------------------------------------------


def lm_batch_loss(lm: DecoderLM, target_lists: list,
                  rng: Optional[np.random.Generator] = None,
                  repeat_frac: float = 0.0) -> Tensor:
    """Next-token cross entropy over BOS-initiated padded sequences.

    With ``repeat_frac`` > 0 that fraction of rows restates a sequence after
    its first occurrence, half the time with another corpus sequence packed
    between the copies.  Pretraining on such rows grows generic in-context
    token-reuse heads (robust to distance and distractors) in the backbone;
    purely i.i.d. rows provably cannot (there is nothing contextual to
    predict), and a frozen backbone without them gives the audio bridge no
    retrieval machinery to steer.  Evaluation always uses plain rows.
    """
    rows_in, rows_lab = [], []
    for idx, t in enumerate(target_lists):
        s = shift_tokens(t)
        draw = rng.random() if (rng is not None and repeat_frac > 0) else 1.0
        if draw < repeat_frac / 2:
            rows_in.append(np.concatenate([[BOS_ID], s, [EOS_ID, BOS_ID], s]))
            rows_lab.append(np.concatenate([s, [EOS_ID, BOS_ID], s, [EOS_ID]]))
        elif draw < repeat_frac:
            other = shift_tokens(target_lists[(idx + 1) % len(target_lists)])
            rows_in.append(np.concatenate(
                [[BOS_ID], s, [EOS_ID, BOS_ID], other, [EOS_ID, BOS_ID], s]))
            rows_lab.append(np.concatenate(
                [s, [EOS_ID, BOS_ID], other, [EOS_ID, BOS_ID], s, [EOS_ID]]))
        else:
            rows_in.append(np.concatenate([[BOS_ID], s]))
            rows_lab.append(np.concatenate([s, [EOS_ID]]))
    b = len(rows_in)
    lens = np.array([len(s) for s in rows_in])
    t_max = int(lens.max())
    inputs = np.zeros((b, t_max), dtype=np.int64)
    labels = np.full((b, t_max), -1, dtype=np.int64)
    for i, (s, l) in enumerate(zip(rows_in, rows_lab)):
        inputs[i, : len(s)] = s
        labels[i, : len(l)] = l
    valid = length_mask(lens, t_max)
    mask = np.tril(np.ones((t_max, t_max), dtype=bool))[None] & valid[:, None, :] & valid[:, :, None]
    positions = np.minimum(np.arange(t_max)[None], (lens - 1)[:, None])
    logits = lm.forward_batch(lm.embed(inputs), mask, positions)
    return packed_cross_entropy(logits, labels)


def lm_perplexity(lm: DecoderLM, target_lists: list, batch_size: int = 16) -> float:
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(target_lists), batch_size):
            chunk = target_lists[i : i + batch_size]
            ce = lm_batch_loss(lm, chunk).item()
            n = sum(len(t) + 1 for t in chunk)
            total += ce * n
            count += n
    return float(np.exp(total / count))


def cmd_pretrain_lm(cfg: ExperimentConfig, out: Path, log: Callable = print) -> dict:
    train = load_split(out, "train")
    valid = load_split(out, "valid")
    train_targets = [ex.target_tokens for ex in train]
    valid_targets = [ex.target_tokens for ex in valid]
    lm = build_lm(cfg)
    t = cfg.training
    stage = StageConfig(name="lm-pretrain", total_steps=t.lm_steps, peak_lr=t.lm_lr,
                        warmup_frac=t.warmup_frac, batch_size=t.batch_size,
                        weight_decay=t.weight_decay, clip_norm=t.clip_norm,
                        val_every=t.val_every, val_batches=t.val_batches,
                        seed=_derived_seed(cfg.seed, "lm-pretrain"))

    def loss_fn(indices, rng):
        return lm_batch_loss(lm, [train_targets[i] for i in indices], rng=rng,
                             repeat_frac=t.lm_repeat_frac)

    def val_fn():
        return lm_batch_loss(lm, valid_targets[: stage.batch_size * stage.val_batches]).item()

    lengths = [len(t_) for t_ in train_targets]
    result = run_training(lm, loss_fn, len(train_targets), lengths, stage,
                          out_path=ckpt_path(out, "lm.ckpt"), val_fn=val_fn,
                          metadata={"config_hash": cfg.config_hash()}, log=log)
    # Re-save with the composite-model name prefix for later partial loads.
    for suffix in ("", ".best"):
        path = Path(str(ckpt_path(out, "lm.ckpt")) + suffix)
        entries, meta = load_checkpoint(path)
        save_checkpoint(_prefixed(entries, "lm."), meta, path)
    ppl = lm_perplexity(lm, valid_targets)
    log(f"[pretrain-lm] valid perplexity {ppl:.2f} (uniform baseline {cfg.lm.vocab_size})")
    return {"perplexity": ppl, "final_val_loss": result.final_val_loss}


def load_pretrained_lm(cfg: ExperimentConfig, out: Path) -> DecoderLM:
    lm = build_lm(cfg)
    path = _require(Path(str(ckpt_path(out, "lm.ckpt")) + ".best"), "speechlm pretrain-lm")
    entries, _ = load_checkpoint(path)
    load_into_model(lm, _strip_prefix(entries, "lm."))
    return lm


# -- compressor pretraining ------------------------------------------------------------


def compressor_batch_loss(model: CtcCompressor, examples: list[CorpusExample]) -> Tensor:
    feats, lens = _padded_features(examples)
    _, log_probs, out_lens = model.forward_batch(Tensor(feats), lens)
    terms = []
    for i, ex in enumerate(examples):
        terms.append(ctc_loss(log_probs[i, : int(out_lens[i])], np.asarray(ex.source_tokens)))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _padded_features(examples: list[CorpusExample]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([ex.num_frames for ex in examples])
    t_max = int(lens.max())
    feats = np.zeros((len(examples), t_max, examples[0].features.shape[1]), dtype=np.float32)
    for i, ex in enumerate(examples):
        feats[i, : ex.num_frames] = ex.features
    return feats, lens


def cmd_pretrain_ctc(cfg: ExperimentConfig, out: Path, log: Callable = print) -> dict:
    train = load_split(out, "train")
    valid = load_split(out, "valid")
    model = build_compressor(cfg)
    t = cfg.training
    stage = StageConfig(name="compressor-pretrain", total_steps=t.compressor_steps,
                        peak_lr=t.compressor_lr, warmup_frac=t.warmup_frac,
                        batch_size=t.batch_size, weight_decay=t.weight_decay,
                        clip_norm=t.clip_norm, val_every=t.val_every,
                        val_batches=t.val_batches,
                        seed=_derived_seed(cfg.seed, "compressor-pretrain"))

    def loss_fn(indices, rng):
        return compressor_batch_loss(model, [train[i] for i in indices])

    def val_fn():
        return compressor_batch_loss(model, valid[: stage.batch_size * stage.val_batches]).item()

    result = run_training(model, loss_fn, len(train), [ex.num_frames for ex in train],
                          stage, out_path=ckpt_path(out, "compressor.ckpt"), val_fn=val_fn,
                          metadata={"config_hash": cfg.config_hash()}, log=log)
    for suffix in ("", ".best"):
        path = Path(str(ckpt_path(out, "compressor.ckpt")) + suffix)
        entries, meta = load_checkpoint(path)
        save_checkpoint(_prefixed(entries, "compressor."), meta, path)
    stats = compression_stats(cfg, out, valid)
    log(f"[pretrain-ctc] valid loss {result.final_val_loss:.3f}; "
        f"frame-average ratio {stats['frame_average_ratio']:.3f}")
    return {**stats, "final_val_loss": result.final_val_loss}


def load_pretrained_compressor(cfg: ExperimentConfig, out: Path) -> CtcCompressor:
    model = build_compressor(cfg)
    path = _require(Path(str(ckpt_path(out, "compressor.ckpt")) + ".best"),
                    "speechlm pretrain-ctc")
    entries, _ = load_checkpoint(path)
    load_into_model(model, _strip_prefix(entries, "compressor."))
    return model


def compression_stats(cfg: ExperimentConfig, out: Path,
                      examples: list[CorpusExample]) -> dict:
    """Held-out compression behavior of the pretrained compressor."""
    model = load_pretrained_compressor(cfg, out)
    from .ctc import BLANK, compress_blank_remove, compress_frame_average

    fa_ratios, br_exact = [], True
    with no_grad():
        for ex in examples:
            hidden, post = model.forward(ex.features)
            t_sub = hidden.shape[0]
            fa = compress_frame_average(hidden, post.alignment)
            fa_ratios.append(fa.shape[0] / t_sub)
            br = compress_blank_remove(hidden, post.alignment)
            non_blank = int(np.sum(post.alignment != BLANK))
            if non_blank > 0 and br.shape[0] != non_blank:
                br_exact = False
    return {
        "frame_average_ratio": float(np.mean(fa_ratios)),
        "blank_remove_exact": bool(br_exact),
    }


# -- variant training ---------------------------------------------------------------


def variant_dir(out: Path, variant: str) -> Path:
    return Path(out) / "checkpoints" / variant


def variant_ckpt(out: Path, variant: str) -> Path:
    settings = VARIANT_SETTINGS_STAGE.get(variant, "model")
    return variant_dir(out, variant) / f"{settings}.ckpt"


VARIANT_SETTINGS_STAGE = {
    "E0": "stage1", "E1": "stage1", "E2": "stage1", "E4": "stage1",
    "E3": "stage2", "E5": "stage2",
}


def _stage_config(cfg: ExperimentConfig, name: str, steps: int, lr: float) -> StageConfig:
    t = cfg.training
    return StageConfig(name=name, total_steps=steps, peak_lr=lr,
                       warmup_frac=t.warmup_frac, batch_size=t.batch_size,
                       weight_decay=t.weight_decay, clip_norm=t.clip_norm,
                       val_every=t.val_every, val_batches=t.val_batches,
                       seed=_derived_seed(cfg.seed, name))


def _train_model(cfg: ExperimentConfig, out: Path, model: Module, stage: StageConfig,
                 loss_of_batch: Callable, ckpt: Path, log: Callable) -> TrainResult:
    train = load_split(out, "train")
    valid = load_split(out, "valid")

    def loss_fn(indices, rng):
        return loss_of_batch(model, [train[i] for i in indices], rng, True)

    def val_fn():
        batch = valid[: stage.batch_size * stage.val_batches]
        return loss_of_batch(model, batch, _rng(stage.seed, "val"), False).item()

    return run_training(model, loss_fn, len(train), [ex.num_frames for ex in train],
                        stage, out_path=ckpt, val_fn=val_fn,
                        metadata={"config_hash": cfg.config_hash(), "variant": stage.name},
                        log=log)


def _prefix_loss(model: AudioPrefixLM, batch, rng, training: bool) -> Tensor:
    return model.batch_loss(batch, prompt_rng=rng, training=training)


def _scratch_loss(model: ScratchSpeechModel, batch, rng, training: bool) -> Tensor:
    return model.batch_loss(batch)


def _seq2seq_loss(model: Seq2SeqModel, batch, rng, training: bool) -> Tensor:
    return model.seq2seq_forward(batch)[2]


def cmd_train(cfg: ExperimentConfig, out: Path, variant: str, log: Callable = print) -> dict:
    validate_variant(cfg, variant)
    t = cfg.training
    if variant == "B2":
        _require(variant_ckpt(out, "B1"), "speechlm train --variant B1")
        log("[train] B2 has no training of its own (rescoring of B1)")
        return {"trainable_params": trainable_param_count(cfg, out, "B1")}

    if variant == "D1":
        model = build_scratch_model(cfg)
        stage = _stage_config(cfg, "D1", t.scratch_steps, t.scratch_lr)
        result = _train_model(cfg, out, model, stage, _scratch_loss,
                              variant_ckpt(out, "D1"), log)
        return {"trainable_params": model.num_parameters(trainable_only=True),
                "final_val_loss": result.final_val_loss}

    if variant == "B1":
        model = build_seq2seq_model(cfg)
        stage = _stage_config(cfg, "B1", t.seq2seq_steps, t.seq2seq_lr)
        result = _train_model(cfg, out, model, stage, _seq2seq_loss,
                              variant_ckpt(out, "B1"), log)
        return {"trainable_params": model.num_parameters(trainable_only=True),
                "final_val_loss": result.final_val_loss}

    settings = variant_settings(variant)
    model = build_prefix_model(cfg, variant)
    if settings["frontend"] == "ctc":
        comp_path = _require(Path(str(ckpt_path(out, "compressor.ckpt")) + ".best"),
                             "speechlm pretrain-ctc")
        entries, _ = load_checkpoint(comp_path)
        load_into_model(model, entries, prefix="compressor.")
    lm_path = _require(Path(str(ckpt_path(out, "lm.ckpt")) + ".best"),
                       "speechlm pretrain-lm")
    entries, _ = load_checkpoint(lm_path)
    load_into_model(model, entries, prefix="lm.")

    if settings["lora"]:
        base = settings["base"]
        base_path = _require(Path(str(variant_ckpt(out, base)) + ".best"),
                             f"speechlm train --variant {base}")
        base_entries, _ = load_checkpoint(base_path)
        load_into_model(model, base_entries)
        inject(model, lora_config(cfg), _rng(cfg.seed, "lora-init", variant))
        apply_freeze_plan(model, ("lora.", "audio_encoder."))
        stage = _stage_config(cfg, variant, t.stage2_steps, t.stage2_lr)
    else:
        trainable = ("audio_encoder.", "subsampler.") if settings["frontend"] == "conv" \
            else ("audio_encoder.",)
        apply_freeze_plan(model, trainable)
        stage = _stage_config(cfg, variant, t.stage1_steps, t.stage1_lr)

    trainable_params = model.num_parameters(trainable_only=True)
    result = _train_model(cfg, out, model, stage, _prefix_loss,
                          variant_ckpt(out, variant), log)
    return {"trainable_params": trainable_params,
            "final_val_loss": result.final_val_loss}


def trainable_param_count(cfg: ExperimentConfig, out: Path, variant: str) -> int:
    if variant in ("B1", "B2"):
        return build_seq2seq_model(cfg).num_parameters()
    if variant == "D1":
        return build_scratch_model(cfg).num_parameters()
    settings = variant_settings(variant)
    model = build_prefix_model(cfg, variant)
    count = model.audio_encoder.num_parameters()
    if settings["frontend"] == "conv":
        count += model.subsampler.num_parameters()
    if settings["lora"]:
        count += lora_param_count(lora_config(cfg), cfg.lm.n_layers,
                                  cfg.lm.model_dim, cfg.lm.model_dim)
    return count


# -- decoding and evaluation ------------------------------------------------------------


def load_trained_variant(cfg: ExperimentConfig, out: Path, variant: str):
    path = _require(Path(str(variant_ckpt(out, variant)) + ".best"),
                    f"speechlm train --variant {variant}")
    entries, _ = load_checkpoint(path)
    if variant in ("B1", "B2"):
        model = build_seq2seq_model(cfg)
    elif variant == "D1":
        model = build_scratch_model(cfg)
    else:
        model = build_prefix_model(cfg, variant)
        if variant_settings(variant)["lora"]:
            inject(model, lora_config(cfg), _rng(cfg.seed, "lora-init", variant))
    load_into_model(model, entries)
    return model


def cmd_decode(cfg: ExperimentConfig, out: Path, variant: str,
               beam: Optional[int] = None, log: Callable = print) -> Path:
    validate_variant(cfg, variant)
    test = load_split(out, "test")
    beam = beam if beam is not None else cfg.decoding.beam
    max_len = cfg.decoding.max_len
    path = decode_path(out, variant)
    path.parent.mkdir(parents=True, exist_ok=True)

    if variant == "B2":
        # B2 shares B1's n-best; rescoring happens in cmd_rescore.
        src = _require(decode_path(out, "B1"), "speechlm decode --variant B1")
        path.write_text(src.read_text(encoding="utf-8"), encoding="utf-8")
        return path

    model = load_trained_variant(cfg, out, variant)
    rows = []
    t0 = time.monotonic()
    if variant == "B1":
        model_cfg = cfg.seq2seq
        for ex in test:
            hyps = _seq2seq_nbest(model, ex, beam, model_cfg.ctc_decode_weight,
                                  max_len, cfg.decoding.n_best)
            for rank, hyp in enumerate(hyps, start=1):
                rows.append({"id": ex.id, "rank": rank,
                             "tokens": _to_content(hyp.tokens),
                             "seq2seq_score": hyp.score, "lm_score": None,
                             "final_score": hyp.score})
    else:
        from .models import PrefixLMScorer

        decoder = model.decoder if variant == "D1" else model.lm
        scorer = PrefixLMScorer(decoder)
        for ex in test:
            prefix = model.decode_prefix(ex)
            hyps = beam_search(scorer, prefix, beam=beam, max_len=max_len)
            for rank, hyp in enumerate(hyps, start=1):
                rows.append({"id": ex.id, "rank": rank,
                             "tokens": _to_content(hyp.tokens), "score": hyp.score})
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    log(f"[decode] {variant}: {len(test)} utterances in {time.monotonic() - t0:.1f}s -> {path}")
    return path


def _seq2seq_nbest(model: Seq2SeqModel, example: CorpusExample, beam: int,
                   ctc_weight: float, max_len: int, n_best: int):
    from .seq2seq import joint_beam_search

    return joint_beam_search(model, example, beam=beam, ctc_decode_weight=ctc_weight,
                             max_len=max_len, n_best=n_best)


def _to_content(lm_tokens) -> list[int]:
    """LM-id hypothesis -> corpus content ids, EOS stripped."""
    toks = [t for t in lm_tokens if t != EOS_ID]
    return unshift_tokens(toks)


def read_decode(path: Path, rank: int = 1) -> dict:
    hyps = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if row["rank"] == rank:
            hyps[row["id"]] = row["tokens"]
    return hyps


def read_nbest(path: Path) -> dict:
    groups: dict = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        groups.setdefault(row["id"], []).append(row)
    for rows in groups.values():
        rows.sort(key=lambda r: r["rank"])
    return groups


def cmd_eval_bleu(cfg: ExperimentConfig, out: Path, variant: str,
                  log: Callable = print) -> dict:
    test = load_split(out, "test")
    hyps_by_id = read_decode(_require(decode_path(out, variant),
                                      f"speechlm decode --variant {variant}"))
    refs, hyps = [], []
    for ex in test:
        refs.append(ex.target_tokens)
        hyps.append(hyps_by_id.get(ex.id, []))
    report = corpus_bleu(hyps, refs)
    acc = token_accuracy(hyps, refs)
    result = {"variant": variant, "bleu": report.bleu, "token_accuracy": acc,
              **report.to_dict()}
    log(json.dumps(result))
    return result


def cmd_rescore(cfg: ExperimentConfig, out: Path, log: Callable = print) -> dict:
    """LM rescoring of B1's n-best over an interpolation-weight grid; writes
    the best-weight reranked list as B2's decode output."""
    nbest = read_nbest(_require(decode_path(out, "B1"), "speechlm decode --variant B1"))
    lm = load_pretrained_lm(cfg, out)
    test = load_split(out, "test")
    refs = {ex.id: ex.target_tokens for ex in test}

    cache: dict = {}

    def lm_score_fn(tokens) -> float:
        key = tuple(tokens)
        if key not in cache:
            cache[key] = lm_log_prob(lm, [t for t in tokens if t >= 1])
        return cache[key]

    grid = np.linspace(0.0, 1.0, cfg.decoding.rescore_grid)
    by_mu = []
    for mu in grid:
        hyps, ref_list = [], []
        reranked_all = {}
        for ex_id, rows in nbest.items():
            reranked = rescore_nbest(rows, lm_score_fn, float(mu))
            reranked_all[ex_id] = reranked
            hyps.append(reranked[0]["tokens"])
            ref_list.append(refs[ex_id])
        bleu = corpus_bleu(hyps, ref_list).bleu
        by_mu.append({"mu": float(mu), "bleu": bleu})
    best = max(by_mu, key=lambda r: r["bleu"])
    log(f"[rescore] best mu {best['mu']:.3f} BLEU {best['bleu']:.2f}")

    rows_out = []
    for ex_id, rows in nbest.items():
        for hyp in rescore_nbest(rows, lm_score_fn, best["mu"]):
            rows_out.append({"id": ex_id, **{k: hyp[k] for k in
                             ("rank", "tokens", "seq2seq_score", "lm_score", "final_score")}})
    decode_path(out, "B2").write_text(
        "\n".join(json.dumps(r) for r in rows_out) + "\n", encoding="utf-8")
    report = {"grid": by_mu, "best_mu": best["mu"], "best_bleu": best["bleu"]}
    (Path(out) / "decode" / "rescore_report.json").write_text(
        json.dumps(report, indent=2), encoding="utf-8")
    return report


def cmd_inspect_checkpoint(path: Path, log: Callable = print) -> dict:
    entries, metadata = load_checkpoint(_require(path, "a training command"))
    rows = [{"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
             "frozen": frozen} for name, (arr, frozen) in entries.items()]
    summary = {"tensors": rows, "metadata": metadata,
               "total_parameters": int(sum(np.prod(r["shape"]) for r in rows))}
    log(json.dumps(summary, indent=2))
    return summary


# -- the experiment matrix ------------------------------------------------------------


MATRIX_ORDER = ("B1", "B2", "D1", "E0", "E1", "E2", "E3", "E4", "E5")


def cmd_run_matrix(cfg: ExperimentConfig, out: Path, variants=None,
                   log: Callable = print) -> dict:
    """Dependency-ordered full run: data -> pretraining -> variant training ->
    decoding -> rescoring -> evaluation.  Emits results.json / results.txt."""
    out = Path(out)
    variants = list(variants or MATRIX_ORDER)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}")
    for v in variants:
        validate_variant(cfg, v)

    t_start = time.monotonic()
    if not corpus_dir(out, "train").exists():
        cmd_gen_data(cfg, out, log)
    needs_lm = any(v.startswith("E") for v in variants) or "B2" in variants
    if needs_lm and not Path(str(ckpt_path(out, "lm.ckpt")) + ".best").exists():
        cmd_pretrain_lm(cfg, out, log)
    needs_ctc = any(variant_settings(v)["frontend"] == "ctc"
                    for v in variants if v.startswith("E"))
    if needs_ctc and not Path(str(ckpt_path(out, "compressor.ckpt")) + ".best").exists():
        cmd_pretrain_ctc(cfg, out, log)

    ordered = [v for v in MATRIX_ORDER if v in variants]
    results = []
    timings = {}
    for variant in ordered:
        t0 = time.monotonic()
        if variant != "B2":
            cmd_train(cfg, out, variant, log)
        cmd_decode(cfg, out, variant, log=log)
        if variant == "B2":
            cmd_rescore(cfg, out, log)
        evaluation = cmd_eval_bleu(cfg, out, variant, log=lambda _m: None)
        timings[variant] = time.monotonic() - t0
        results.append({
            "variant": variant,
            "trainable_params": trainable_param_count(cfg, out, variant),
            "bleu": round(evaluation["bleu"], 4),
            "token_accuracy": round(evaluation["token_accuracy"], 6),
            "wall_seconds": round(timings[variant], 2),
        })

    table = {"results": results, "config_hash": cfg.config_hash(), "seed": cfg.seed,
             "total_wall_seconds": round(time.monotonic() - t_start, 2)}
    (out / "results.json").write_text(json.dumps(table, indent=2), encoding="utf-8")
    text = format_results_table(results)
    (out / "results.txt").write_text(text, encoding="utf-8")
    log(text)
    return table


def format_results_table(results: list[dict]) -> str:
    headers = ("variant", "trainable_params", "bleu", "token_accuracy", "wall_seconds")
    rows = [[str(r[h]) for h in headers] for r in results]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)

"""Synthetic speech-translation corpus with exactly known ground truth.

Each source token expands into a run of noisy copies of a per-language
codebook row; the target side is a per-language token cipher followed by a
full reversal, so the task needs global reordering rather than frame-local
copying.  Token id 0 is reserved for CTC blank / padding in every vocabulary;
generated ids start at 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

FEATURE_MAGIC = b"SLFB"
FEATURE_VERSION = 1
BLANK_ID = 0

MANIFEST_FIELDS = (
    "id",
    "language_id",
    "source_tokens",
    "target_tokens",
    "feature_file",
    "num_frames",
    "feature_dim",
)


@dataclass(frozen=True)
class GeneratorConfig:
    source_vocab_size: int = 32
    target_vocab_size: int = 32
    feature_dim: int = 16
    # Frames per token. Must be large enough that 4x-subsampled utterances
    # still satisfy the CTC length condition and leave headroom for duration
    # compression; see docs in the repo root.
    duration_range: tuple[int, int] = (12, 20)
    noise_sigma: float = 0.1
    utterance_length_range: tuple[int, int] = (3, 12)
    seed: int = 0
    num_languages: int = 2

    def validate(self) -> "GeneratorConfig":
        if self.source_vocab_size < 2 or self.target_vocab_size < 2:
            raise ConfigError("vocabulary sizes must be >= 2")
        if self.duration_range[0] < 1 or self.duration_range[0] > self.duration_range[1]:
            raise ConfigError(f"bad duration_range {self.duration_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.utterance_length_range[0] < 1:
            raise ConfigError("utterances need at least one token")
        if self.num_languages < 1:
            raise ConfigError("need at least one language")
        return self


@dataclass
class CorpusExample:
    id: str
    language_id: int
    source_tokens: list[int]
    target_tokens: list[int]
    features: np.ndarray  # (frames, feature_dim) fp32
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


def _derived_rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def language_codebook(config: GeneratorConfig, language_id: int) -> np.ndarray:
    """Per-language token embedding rows e(t), fixed for the corpus lifetime."""
    rng = _derived_rng(config.seed, 1000 + language_id)
    return rng.standard_normal((config.source_vocab_size, config.feature_dim)).astype(np.float32)


def language_cipher(config: GeneratorConfig, language_id: int) -> np.ndarray:
    """Seeded bijection over content ids 1..V-1 (index 0 maps to itself)."""
    rng = _derived_rng(config.seed, 2000 + language_id)
    content = np.arange(1, config.source_vocab_size)
    mapping = np.concatenate([[0], rng.permutation(content)])
    return mapping


def apply_cipher(cipher: np.ndarray, source_tokens) -> list[int]:
    """Target construction: token-wise cipher, then full reversal."""
    return [int(cipher[t]) for t in reversed(list(source_tokens))]


def invert_cipher(cipher: np.ndarray, target_tokens) -> list[int]:
    inverse = np.empty_like(cipher)
    inverse[cipher] = np.arange(len(cipher))
    return [int(inverse[t]) for t in reversed(list(target_tokens))]


def generate_example(
    config: GeneratorConfig,
    language_id: int,
    rng: np.random.Generator,
    example_id: str = "",
) -> CorpusExample:
    """Draw one utterance. Randomness comes solely from ``rng``."""
    config.validate()
    if not 0 <= language_id < config.num_languages:
        raise ConfigError(f"language_id {language_id} outside 0..{config.num_languages - 1}")
    lo, hi = config.utterance_length_range
    n_tokens = int(rng.integers(lo, hi + 1))
    source = rng.integers(1, config.source_vocab_size, size=n_tokens)
    d_min, d_max = config.duration_range
    durations = rng.integers(d_min, d_max + 1, size=n_tokens)
    codebook = language_codebook(config, language_id)
    frames = np.repeat(codebook[source], durations, axis=0)
    if config.noise_sigma > 0:
        frames = frames + rng.normal(0.0, config.noise_sigma, size=frames.shape).astype(np.float32)
    target = apply_cipher(language_cipher(config, language_id), source)
    return CorpusExample(
        id=example_id,
        language_id=language_id,
        source_tokens=[int(t) for t in source],
        target_tokens=target,
        features=frames.astype(np.float32),
        extras={"durations": durations.tolist()},
    )


def generate_corpus(config: GeneratorConfig, size: int, split: str = "train") -> list[CorpusExample]:
    """Examples derive their randomness from (seed, split, index), so parallel
    and serial generation agree."""
    config.validate()
    examples = []
    for i in range(size):
        rng = _derived_rng(config.seed, _split_key(split), i)
        language_id = i % config.num_languages
        examples.append(
            generate_example(config, language_id, rng, example_id=f"{split}-{i:06d}")
        )
    return examples


def _split_key(split: str) -> int:
    return int.from_bytes(split.encode("utf-8")[:8].ljust(8, b"\0"), "little")


# -- persistence ---------------------------------------------------------------


def write_feature_file(path: Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DataFormatError(f"features must be 2-D, got {features.shape}")
    header = FEATURE_MAGIC + struct.pack(
        "<III", FEATURE_VERSION, features.shape[0], features.shape[1]
    )
    path.write_bytes(header + features.tobytes())


def read_feature_file(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: not a feature file (bad magic)")
    version, frames, dim = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported feature version {version}")
    expected = 16 + 4 * frames * dim
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: integrity error, payload is {len(raw)} bytes, header declares {expected}"
        )
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(frames, dim).copy()


def write_corpus(examples: list[CorpusExample], directory: Path) -> None:
    directory = Path(directory)
    feat_dir = directory / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in examples:
        feature_file = f"features/{ex.id}.slfb"
        write_feature_file(directory / feature_file, ex.features)
        lines.append(
            json.dumps(
                {
                    "id": ex.id,
                    "language_id": ex.language_id,
                    "source_tokens": ex.source_tokens,
                    "target_tokens": ex.target_tokens,
                    "feature_file": feature_file,
                    "num_frames": ex.num_frames,
                    "feature_dim": int(ex.features.shape[1]),
                },
                sort_keys=True,
            )
        )
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(directory: Path) -> list[CorpusExample]:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise DataFormatError(f"{manifest}: manifest not found")
    examples = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{manifest}: malformed manifest line {lineno}: {exc}") from exc
        missing = [k for k in MANIFEST_FIELDS if k not in record]
        if missing:
            raise DataFormatError(
                f"{manifest}: manifest line {lineno} missing fields {missing}"
            )
        features = read_feature_file(directory / record["feature_file"])
        if features.shape != (record["num_frames"], record["feature_dim"]):
            raise DataFormatError(
                f"{manifest}: line {lineno}: feature file shape {features.shape} does not "
                f"match declared ({record['num_frames']}, {record['feature_dim']})"
            )
        examples.append(
            CorpusExample(
                id=record["id"],
                language_id=int(record["language_id"]),
                source_tokens=[int(t) for t in record["source_tokens"]],
                target_tokens=[int(t) for t in record["target_tokens"]],
                features=features,
            )
        )
    return examples

"""Named-tensor checkpoint archive.

Layout: magic "SLMK", u32 version, u32 tensor count; per tensor a u16 name
length, the utf-8 name, u8 dtype code (0=fp32, 1=fp64), u8 frozen flag, u8
ndim, u32 dims, then the little-endian payload; finally a u32-length-prefixed
JSON metadata blob.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .nn import Module

MAGIC = b"SLMK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(entries: dict[str, tuple[np.ndarray, bool]], metadata: dict,
                    path: Path) -> None:
    """``entries`` maps tensor name -> (array, frozen flag)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, (array, frozen) in entries.items():
        arr = np.ascontiguousarray(array)
        if arr.dtype not in _DTYPE_CODES:
            raise DataFormatError(f"{name}: unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(
            struct.pack("<BBB", _DTYPE_CODES[arr.dtype], int(bool(frozen)), arr.ndim)
        )
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)))
    chunks.append(meta)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> tuple[dict[str, tuple[np.ndarray, bool]], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    entries: dict[str, tuple[np.ndarray, bool]] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            dtype_code, frozen, ndim = struct.unpack_from("<BBB", raw, offset)
            offset += 3
            dims = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            dtype = _DTYPES[dtype_code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
            array = np.frombuffer(raw, dtype=dtype, count=max(int(np.prod(dims, dtype=np.int64)), 1) if ndim else 1, offset=offset)
            array = array.reshape(dims).copy()
            offset += nbytes
            entries[name] = (array, bool(frozen))
        (meta_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        metadata = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    except (struct.error, KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc
    return entries, metadata


def model_entries(model: Module) -> dict[str, tuple[np.ndarray, bool]]:
    return {name: (p.data, p.frozen) for name, p in model.named_parameters()}


def load_into_model(model: Module, entries: dict[str, tuple[np.ndarray, bool]],
                    prefix: str = "", restore_freeze: bool = False) -> list[str]:
    """Copy matching entries into the model's parameters (bit-exact).

    With a ``prefix``, only names under it load and parameters outside it are
    untouched.  Entry names (under the prefix) that do not exist in the model
    raise, listing the offenders.  Returns the loaded names.
    """
    params = dict(model.named_parameters())
    selected = {n: v for n, v in entries.items() if n.startswith(prefix)}
    unknown = sorted(n for n in selected if n not in params)
    if unknown:
        raise DataFormatError(f"checkpoint contains unknown parameter names: {unknown}")
    loaded = []
    for name, (array, frozen) in selected.items():
        p = params[name]
        if p.data.shape != array.shape:
            raise DataFormatError(
                f"{name}: checkpoint shape {array.shape} != model shape {p.data.shape}"
            )
        p.data = array.astype(p.data.dtype, copy=True)
        if restore_freeze:
            if frozen:
                p.freeze()
            else:
                p.unfreeze()
        loaded.append(name)
    return loaded

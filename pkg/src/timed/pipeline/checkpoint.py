"""Binary tensor container shared by checkpoints and dataset caches.

Layout (all integers little-endian)::

    b"TIMEDBIN"  u32 version  u32 tensor_count
    per tensor:  u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  float32 data[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TIMEDBIN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be stored (name or rank too large)")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated file: needed {n} bytes for {what} at offset {pos}, file has {len(blob)}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    magic = take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {MAGIC!r}, got {magic!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset {len(MAGIC)} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor name at offset {start} is not valid UTF-8") from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        out[name] = data.astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes at offset {pos}")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# fingerprints are 16 hex digits = 4 16-bit words, exact in float32


def fingerprint_to_words(fp: str) -> np.ndarray:
    value = int(fp, 16)
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def words_to_fingerprint(words) -> str:
    value = sum(int(w) << (16 * i) for i, w in enumerate(np.asarray(words).reshape(-1)))
    return f"{value:016x}"

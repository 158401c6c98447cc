"""Binary checkpoint format.

Layout (integers big-endian, tensor data little-endian float32)::

    b"DMT2" | u32 version | u32 len + config text (utf-8)
    u32 tensor count, then per tensor:
        u32 len + name (utf-8) | u32 rank | rank x u64 dims | float32 blob
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..tracker import TrackerModel
from .config import TrainConfig, from_text, to_text

MAGIC = b"DMT2"
VERSION = 1


class CheckpointError(Exception):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


def encode(cfg: TrainConfig, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack(">I", VERSION)]
    text = to_text(cfg).encode("utf-8")
    parts += [struct.pack(">I", len(text)), text, struct.pack(">I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts += [struct.pack(">I", len(raw)), raw, struct.pack(">I", arr.ndim)]
        parts += [struct.pack(">Q", n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack(">I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise MagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise ChecksumError("file truncated before the version field")
    (version,) = struct.unpack(">I", blob[4:8])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if len(blob) < 12:
        raise ChecksumError("file truncated before the checksum")
    body, (crc,) = blob[:-4], struct.unpack(">I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC-32 mismatch: checkpoint is corrupt or truncated")

    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise FormatError("unexpected end of checkpoint body")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (n_text,) = struct.unpack(">I", take(4))
    cfg = from_text(take(n_text).decode("utf-8"))
    (count,) = struct.unpack(">I", take(4))
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack(">I", take(4))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack(">I", take(4))
        shape = tuple(struct.unpack(">Q", take(8))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
    if pos != len(body):
        raise FormatError("trailing bytes after tensor table")
    return cfg, tensors


def model_tensors(model: TrackerModel) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def save_checkpoint(model: TrackerModel, cfg: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(cfg, model_tensors(model)))
    return path


def load_checkpoint(path: str | Path) -> tuple[TrackerModel, TrainConfig]:
    cfg, tensors = decode(Path(path).read_bytes())
    model = TrackerModel(cfg.model, seed=cfg.train.seed)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise FormatError(f"tensor table does not match the model: {missing[:5]}")
    for name, p in params.items():
        if p.shape != tensors[name].shape:
            raise FormatError(f"{name}: shape {tensors[name].shape} != model shape {p.shape}")
        p.data = tensors[name].astype(np.float64)
    return model, cfg

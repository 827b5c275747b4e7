"""Versioned binary checkpoints: parameters, batchnorm stats, provenance.

Layout (all integers little-endian):

    magic "LPRB" | u32 version | u32 len + arch descriptor utf8
    | u32 len + provenance utf8 | u32 tensor count
    | per tensor: u32 name len, name utf8, u8 dtype tag (0 = float64),
      u8 rank, u32 extents..., raw little-endian payload
    | u32 CRC-32 of every preceding byte

Round trips are bit-exact; a flipped payload byte fails the checksum.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .models import ModelGraph, build_from_descriptor

MAGIC = b"LPRB"
VERSION = 1
_DTYPE_F64 = 0


class CheckpointFormatError(ValueError):
    """Structurally invalid checkpoint file."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint written by an incompatible format version."""


class CheckpointCorruptionError(CheckpointFormatError):
    """Checksum mismatch: the file content was altered."""


@dataclass
class Checkpoint:
    version: int
    arch_descriptor: str
    provenance: dict
    tensors: dict = field(repr=False)


def _encode_provenance(provenance: dict) -> str:
    items = sorted((str(k), str(v)) for k, v in provenance.items())
    for k, v in items:
        if "=" in k or ";" in k or "=" in v or ";" in v:
            raise ValueError(f"provenance entries must not contain '=' or ';': {k}={v}")
    return ";".join(f"{k}={v}" for k, v in items)


def _decode_provenance(text: str) -> dict:
    if not text:
        return {}
    return dict(item.split("=", 1) for item in text.split(";"))


def save_checkpoint(path, model: ModelGraph, provenance: dict | None = None) -> None:
    """Serialize a model's full state (parameters + running stats) to disk."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    desc = model.arch_descriptor.encode()
    chunks.append(struct.pack("<I", len(desc)))
    chunks.append(desc)
    prov = _encode_provenance(provenance or {}).encode()
    chunks.append(struct.pack("<I", len(prov)))
    chunks.append(prov)
    items = model.state_items()
    chunks.append(struct.pack("<I", len(items)))
    for name, arr in items:
        name_b = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} remain"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointFormatError("file too short to be a checkpoint")
    body, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointCorruptionError("checksum mismatch: checkpoint is corrupted")

    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported "
            f"(this build reads version {VERSION}); upgrade required"
        )
    desc = r.take(r.u32()).decode()
    provenance = _decode_provenance(r.take(r.u32()).decode())
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        dtype_tag, rank = struct.unpack("<BB", r.take(2))
        if dtype_tag != _DTYPE_F64:
            raise CheckpointFormatError(f"unknown dtype tag {dtype_tag} for tensor {name}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if rank else 8
        payload = r.take(n_bytes)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointFormatError(f"{len(body) - r.pos} trailing bytes after tensor records")
    return Checkpoint(version=version, arch_descriptor=desc,
                      provenance=provenance, tensors=tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> ModelGraph:
    """Rebuild the architecture from its descriptor and load every tensor."""
    model = build_from_descriptor(ckpt.arch_descriptor)
    model.load_state(ckpt.tensors)
    return model


def load_model(path) -> tuple:
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt

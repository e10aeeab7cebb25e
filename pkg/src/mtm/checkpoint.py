"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"MTMCKPT1"                          magic; the last byte is the version
    n_tokens, then per token: len, utf-8 bytes            vocabulary, id order
    n_tensors, then per tensor: len, name, rank, dims..., float32 values
    len, utf-8 JSON (sorted keys)                         provenance

Parameters are computed in float64 and rounded to float32 on save.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .textmodel import EncoderParams, Vocab

MAGIC_PREFIX = b"MTMCKPT"
VERSION = b"1"
MAGIC = MAGIC_PREFIX + VERSION


class CheckpointError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    vocab: Vocab
    tensors: dict  # name -> float64 array (values representable in float32)
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, vocab: Vocab, params: EncoderParams, **provenance) -> Checkpoint:
        return cls(vocab, {k: v.astype(np.float32).astype(np.float64) for k, v in params.as_dict().items()}, provenance)

    def params(self) -> EncoderParams:
        return EncoderParams.from_dict(self.tensors)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        u32 = struct.Struct("<I")
        out += u32.pack(len(self.vocab))
        for tok in self.vocab.itos:
            raw = tok.encode("utf-8")
            out += u32.pack(len(raw)) + raw
        out += u32.pack(len(self.tensors))
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            out += u32.pack(len(raw)) + raw + u32.pack(arr.ndim)
            for dim in arr.shape:
                out += u32.pack(dim)
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        prov = json.dumps(self.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out += u32.pack(len(prov)) + prov
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        reader = _Reader(data)
        magic = reader.take(len(MAGIC), "magic")
        if magic[: len(MAGIC_PREFIX)] != MAGIC_PREFIX:
            raise CheckpointError("not a checkpoint: unrecognised magic/version", 0)
        if magic != MAGIC:
            raise CheckpointError(f"unsupported checkpoint version {magic[-1:]!r}", len(MAGIC_PREFIX))
        tokens = [reader.text("vocabulary token") for _ in range(reader.u32("vocabulary size"))]
        try:
            vocab = Vocab(tokens)
        except ValueError as exc:
            raise CheckpointError(f"invalid vocabulary: {exc}", len(MAGIC)) from None
        tensors = {}
        for _ in range(reader.u32("tensor count")):
            name = reader.text("tensor name")
            rank = reader.u32("rank")
            shape = tuple(reader.u32("dimension") for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64))
            raw = reader.take(4 * count, f"values of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        prov_raw = reader.take(reader.u32("provenance length"), "provenance")
        try:
            provenance = json.loads(prov_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError("corrupt provenance block", reader.pos - len(prov_raw)) from None
        if reader.pos != len(data):
            raise CheckpointError("trailing bytes after provenance", reader.pos)
        return cls(vocab, tensors, provenance)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        start = self.pos
        raw = self.take(self.u32(what), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"invalid UTF-8 in {what}", start) from None

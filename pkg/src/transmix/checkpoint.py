"""Versioned binary parameter container.

Layout (all integers little-endian uint32)::

    magic    b"TMXCKPT\\0"
    version  1
    config   byte length, then UTF-8 ``key = value`` lines of the ModelConfig
    count    number of tensors
    tensor*  name length, name bytes, rank, dims..., float32 LE values
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .tensor import Tensor
from .vit import ModelConfig, Parameters

MAGIC = b"TMXCKPT\0"
VERSION = 1
_U32 = struct.Struct("<I")


def _render_model(cfg: ModelConfig) -> bytes:
    return "".join(f"{k} = {v!r}\n" for k, v in cfg.to_dict().items()).encode()


def _parse_model(text: str) -> ModelConfig:
    vals = {}
    types = {k: type(v) for k, v in ModelConfig().to_dict().items()}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise FormatError(f"unknown model config key {key!r} in checkpoint")
        vals[key] = types[key](value.strip())
    return ModelConfig(**vals)


def save_checkpoint(path, params: Parameters, cfg: ModelConfig) -> None:
    out = bytearray(MAGIC)
    out += _U32.pack(VERSION)
    block = _render_model(cfg)
    out += _U32.pack(len(block)) + block
    out += _U32.pack(len(params))
    for name, t in params.items():
        nb = name.encode()
        out += _U32.pack(len(nb)) + nb
        out += _U32.pack(t.values.ndim)
        for d in t.values.shape:
            out += _U32.pack(d)
        out += np.ascontiguousarray(t.values, dtype="<f4").tobytes()
    with open(os.fspath(path), "wb") as fh:
        fh.write(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte offset {self.pos}")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path) -> tuple[ModelConfig, Parameters]:
    with open(os.fspath(path), "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = _parse_model(r.take(r.u32()).decode())
    params: Parameters = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = Tensor(values, requires_grad=True, name=name)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return cfg, params

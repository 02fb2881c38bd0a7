"""Binary checkpoint I/O.

Layout (all integers little-endian)::

    magic          8 bytes   b"RESUNET\\x00"
    version        u32
    meta_len       u32
    meta           meta_len bytes, UTF-8 JSON object
    n_params       u32       learnable tensors, listed first
    n_tensors      u32
    n_tensors x:
        name_len   u16
        name       UTF-8
        ndim       u8
        dims       ndim x u32
        data       prod(dims) x float32
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import SCHEMA_VERSION, ParamStore, tensor_shapes

MAGIC = b"RESUNET\x00"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class SchemaMismatchError(CheckpointError):
    """Version, tensor name or tensor shape does not match the expected graph."""


def save_checkpoint(store: ParamStore, path: str) -> None:
    meta = json.dumps(store.meta, sort_keys=True).encode()
    entries = list(store.items())
    parts = [MAGIC, struct.pack("<II", SCHEMA_VERSION, len(meta)), meta]
    parts.append(struct.pack("<II", len(store.params), len(entries)))
    for name, arr in entries:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.path}: truncated at byte {len(self.buf)} (needed {self.pos + n})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str, validate: bool = True) -> ParamStore:
    """Read a checkpoint; with ``validate`` the tensors must match the graph named in its metadata."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a ResUnet checkpoint (bad magic bytes)")
    r = _Reader(buf, path)
    r.take(len(MAGIC))
    version, meta_len = r.unpack("<II")
    if version != SCHEMA_VERSION:
        raise SchemaMismatchError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata: {exc}") from exc
    n_params, n_tensors = r.unpack("<II")
    store = ParamStore(meta=meta)
    for i in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        (store.params if i < n_params else store.buffers)[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    if validate:
        check_against_graph(store, path)
    return store


def check_against_graph(store: ParamStore, where: str = "checkpoint") -> None:
    expected = [(name, shape) for name, shape, _ in tensor_shapes(store.graph())]
    got = [(name, arr.shape) for name, arr in store.items()]
    exp_names = {n for n, _ in expected}
    got_names = {n for n, _ in got}
    if exp_names != got_names:
        missing = sorted(exp_names - got_names)
        extra = sorted(got_names - exp_names)
        raise SchemaMismatchError(f"{where}: tensor names differ from graph (missing {missing}, unexpected {extra})")
    got_map = dict(got)
    for name, shape in expected:
        if tuple(got_map[name]) != tuple(shape):
            raise SchemaMismatchError(f"{where}: {name} has shape {got_map[name]}, graph expects {shape}")

"""Flat binary checkpoints of every parameter and buffer of a module tree.

Layout, all little-endian::

    magic   8 bytes  b"MAILCKPT"
    version u32      1
    count   u32      number of tensors
    then per tensor:
      name_len u16, name (utf-8), rank u8, extents u64 * rank, data f8 * prod(extents)

Names are the dotted attribute paths.  Buffers (batch-norm running
statistics, sampled random filter banks) are stored alongside parameters so
a reload reproduces outputs bit for bit.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError
from .nn import Module

MAGIC = b"MAILCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sII")


def state_dict(model: Module) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.named_parameters():
        out[name] = p.data
    for name, b in model.named_buffers():
        out[name] = b
    return out


def to_bytes(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < _HEAD.size:
        raise FormatError(f"checkpoint header needs {_HEAD.size} bytes, got {len(buf)}", len(buf))
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    pos = _HEAD.size
    out: OrderedDict[str, np.ndarray] = OrderedDict()

    def need(n: int, what: str) -> None:
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)

    for _ in range(count):
        need(2, "name length")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(n + 1, "name")
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not utf-8: {exc}", pos) from None
        pos += n
        rank = buf[pos]
        pos += 1
        need(8 * rank, f"extents of {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64)) * 8
        need(size, f"data of {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} tensors", pos)
    return out


def save_checkpoint(model: Module, path: str | os.PathLike) -> None:
    """Write atomically: a failed write never leaves a partial file at ``path``."""
    data = to_bytes(state_dict(model))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_state(model: Module, tensors: "OrderedDict[str, np.ndarray]") -> None:
    """Copy tensors into ``model``; names and shapes must match its parameters exactly."""
    params = dict(model.named_parameters())
    buffers = {name for name, _ in model.named_buffers()}
    modules = dict(model.named_modules())
    missing = [k for k in params if k not in tensors]
    if missing:
        raise FormatError(f"checkpoint lacks {len(missing)} parameters, first {missing[0]!r}", 0)
    for name, arr in tensors.items():
        if name in params:
            p = params[name]
            if p.data.shape != arr.shape:
                raise FormatError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}", 0)
            p.data = arr.copy()
            continue
        owner, _, attr = name.rpartition(".")
        mod = modules.get(owner)
        if mod is None or attr not in getattr(mod, "_buffers", ()):
            raise FormatError(f"checkpoint tensor {name!r} has no place in this model", 0)
        current = getattr(mod, attr)
        if name in buffers and current.shape != arr.shape:
            raise FormatError(f"{name}: checkpoint shape {arr.shape} != model shape {current.shape}", 0)
        setattr(mod, attr, arr.copy())


def load_checkpoint(model: Module, path: str | os.PathLike) -> Module:
    with open(path, "rb") as fh:
        load_state(model, from_bytes(fh.read()))
    return model

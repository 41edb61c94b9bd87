"""
Binary checkpoint format.

Layout (all integers little-endian)::

    b"CCNT" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u32 dim | f32 values )
    u8 has_optimizer
    [ u64 step | f64 lr | u64 epoch | count x ( f32 m | f32 v ) ]   if has_optimizer

Entries are written in name-sorted order. Optimizer moments follow the same
order and cover only entries that appear in its moment maps; buffers get zeros.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"CCNT"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class OptimizerSnapshot:
    step: int
    lr: float
    epoch: int
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _pack_tensors(fh, state: dict):
    names = list(state)
    if len(set(names)) != len(names):
        raise IntegrityError("duplicate parameter names")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(names)))
    for name in sorted(names):
        arr = np.asarray(state[name])
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_F32).tobytes())


def encode_checkpoint(state: dict, optimizer: OptimizerSnapshot | None = None) -> bytes:
    buf = io.BytesIO()
    _pack_tensors(buf, state)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<QdQ", optimizer.step, optimizer.lr, optimizer.epoch))
        for name in sorted(state):
            shape = np.shape(state[name])
            for moments in (optimizer.m, optimizer.v):
                arr = moments.get(name)
                arr = np.zeros(shape) if arr is None else np.asarray(arr)
                buf.write(arr.astype(_F32).tobytes())
    return buf.getvalue()


def save_checkpoint(state, path, optimizer: OptimizerSnapshot | None = None) -> Path:
    """Write ``state`` (a ParamStore or a name -> array map) to ``path``."""
    if hasattr(state, "state"):
        state = state.state()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, optimizer))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple[dict, OptimizerSnapshot | None]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, not a CCNT checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(n * 4), dtype=_F32).reshape(shape)
        if name in state:
            raise IntegrityError(f"duplicate parameter name {name!r}")
        state[name] = values.astype(np.float64)
    (flag,) = r.unpack("<B")
    opt = None
    if flag == 1:
        step, lr, epoch = r.unpack("<QdQ")
        opt = OptimizerSnapshot(step, lr, epoch)
        for name, arr in state.items():
            for moments in (opt.m, opt.v):
                raw = r.take(arr.size * 4)
                moments[name] = np.frombuffer(raw, dtype=_F32).reshape(arr.shape).astype(np.float64)
    elif flag != 0:
        raise FormatError(f"bad optimizer flag {flag}")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return state, opt


def load_checkpoint(path) -> tuple[dict, OptimizerSnapshot | None]:
    return decode_checkpoint(Path(path).read_bytes())

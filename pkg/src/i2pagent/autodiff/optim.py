"""Named parameters, Adam and the checkpoint file format.

Checkpoint layout (little-endian)::

    magic    8 bytes  b"I2PCKPT\\0"
    version  u32      CHECKPOINT_VERSION
    count    u32      number of parameters
    step     u64      Adam step counter
    count x:
        u16 name length, UTF-8 name
        u8 ndim, ndim x u32 dims
        f32 values (row-major)
        u8 has_moments; if 1: f32 first moment, f32 second moment

Parameters are written in name order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"I2PCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterStore:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.params.values() if p.grad is not None)))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if max_norm and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.98, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction; parameters without a gradient
    are left alone."""
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, p in store.params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def save_checkpoint(store: ParameterStore, path) -> None:
    out = [CHECKPOINT_MAGIC, struct.pack("<IIQ", CHECKPOINT_VERSION, len(store), store.step)]
    for name in sorted(store.params):
        data = store.params[name].data
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
        if name in store.m:
            out.append(b"\x01")
            out.append(np.ascontiguousarray(store.m[name], dtype="<f4").tobytes())
            out.append(np.ascontiguousarray(store.v[name], dtype="<f4").tobytes())
        else:
            out.append(b"\x00")
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path):
    """Parse a checkpoint into ``(step, {name: (values, m, v)})``."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count, step = struct.unpack("<IIQ", take(16, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, name))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, name))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(4 * size, name), dtype="<f4").reshape(shape).astype(np.float32)
        m = v = None
        if take(1, name) == b"\x01":
            m = np.frombuffer(take(4 * size, name), dtype="<f4").reshape(shape).astype(np.float32)
            v = np.frombuffer(take(4 * size, name), dtype="<f4").reshape(shape).astype(np.float32)
        entries[name] = (values, m, v)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint")
    return step, entries


def load_checkpoint(store: ParameterStore, path) -> None:
    """Load values and optimiser state into an existing store of matching layout."""
    step, entries = read_checkpoint(path)
    missing = set(store.params) - set(entries)
    extra = set(entries) - set(store.params)
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, (values, m, v) in entries.items():
        p = store.params[name]
        if p.data.shape != values.shape:
            raise CheckpointError(f"{name}: checkpoint shape {values.shape} != model shape {p.data.shape}")
    for name, (values, m, v) in entries.items():
        store.params[name].data = values.copy()
        store.params[name].grad = None
        if m is not None:
            store.m[name] = m.copy()
            store.v[name] = v.copy()
        else:
            store.m.pop(name, None)
            store.v.pop(name, None)
    store.step = step

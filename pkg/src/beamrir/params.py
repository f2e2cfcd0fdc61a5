"""Learnable parameter store and the binary checkpoint format.

Checkpoint layout (little-endian): magic "AVDP", u32 version, u32 tensor
count, then per tensor: u16 name length, name bytes (utf-8), u8 ndim,
u32 dims..., float32 data.  A JSON sidecar carries the run configuration.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Var

MAGIC = b"AVDP"
VERSION = 1


class CheckpointError(IOError):
    pass


class ParameterStore(dict):
    """name -> Var mapping with init, grouping and gradient helpers."""

    def __init__(self, seed=0):
        super().__init__()
        self.rng = np.random.default_rng(seed)

    def add(self, name, array):
        if name in self:
            raise KeyError(f"parameter {name!r} already exists")
        self[name] = Var(np.asarray(array, dtype=np.float64), name=name)
        return self[name]

    def linear(self, name, fan_in, fan_out, bias=True):
        """Kaiming-style uniform init: W (fan_in, fan_out) and zero bias."""
        bound = np.sqrt(6.0 / fan_in)
        w = self.add(f"{name}.W", self.rng.uniform(-bound, bound, (fan_in, fan_out)))
        b = self.add(f"{name}.b", np.zeros(fan_out)) if bias else None
        return w, b

    def zero_grads(self):
        for v in self.values():
            v.grad = None

    def grads(self):
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for k, v in self.items()}

    def group(self, prefix):
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def n_params(self):
        return sum(v.data.size for v in self.values())


def save_checkpoint(store: ParameterStore, path, config: dict | None = None):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(store)))
        for name in sorted(store):
            data = store[name].data.astype("<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())
    if config is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(config, f, indent=2)


def load_checkpoint(path) -> tuple[ParameterStore, dict | None]:
    store = ParameterStore()
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            store.add(name, np.frombuffer(raw, dtype="<f4").reshape(shape))
    config = None
    try:
        with open(str(path) + ".json") as f:
            config = json.load(f)
    except FileNotFoundError:
        pass
    return store, config

"""Parameter storage, initialization, SGD and the binary checkpoint format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .tensor_core import Tensor

MAGIC = b"SSTCKPT1"
FORMAT_VERSION = 1


class InvalidSpec(ValueError):
    pass


class MissingGrad(RuntimeError):
    pass


class CorruptCheckpoint(ValueError):
    pass


class ShapeConflict(ValueError):
    pass


class ConvSpec(NamedTuple):
    name: str
    c_out: int
    c_in: int
    k: int


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.0005
    weight_decay: float = 0.0005
    momentum: float = 0.9
    # inverse-time decay coefficient, 0 disables
    lr_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_decay < 0:
            raise ValueError(f"lr_decay must be >= 0, got {self.lr_decay}")


class ParameterStore:
    """Ordered name -> tensor mapping of learnable weights plus optimizer state."""

    version = FORMAT_VERSION

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] = ()):
        self._entries: dict[str, Tensor] = {}
        self._velocity: dict[str, np.ndarray] = {}
        self.steps = 0
        for name, value in entries:
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise InvalidSpec(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._entries.items()}

    def frozen(self) -> "ParameterStore":
        """View whose tensors share values but never collect gradients."""
        view = ParameterStore.__new__(ParameterStore)
        view._entries = {k: Tensor(v.data, requires_grad=False) for k, v in self._entries.items()}
        view._velocity = {}
        view.steps = self.steps
        return view

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def equals(self, other: "ParameterStore") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


def init_parameters(spec: Iterable[ConvSpec], seed: int) -> ParameterStore:
    """He-uniform conv weights, zero biases, reproducible per seed."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for layer in spec:
        name, c_out, c_in, k = layer
        if min(c_out, c_in, k) < 1 or k % 2 == 0:
            raise InvalidSpec(f"bad conv layer {layer}")
        bound = math.sqrt(6.0 / (c_in * k * k))
        store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        store.add(f"{name}.bias", np.zeros(c_out))
    return store


def sgd_step(params: ParameterStore, cfg: OptimizerConfig) -> ParameterStore:
    """Momentum SGD with L2 weight decay added to the gradient; clears grads."""
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise MissingGrad(f"no gradient for {missing}")
    lr = np.float32(cfg.learning_rate / (1.0 + cfg.lr_decay * params.steps))
    mom, wd = np.float32(cfg.momentum), np.float32(cfg.weight_decay)
    for name, t in params.items():
        d = t.grad + wd * t.data
        v = params._velocity.get(name)
        v = d if v is None else mom * v + d
        params._velocity[name] = v
        t.data = t.data - lr * v
        t.grad = None
    params.steps += 1
    return params


def save_checkpoint(params: ParameterStore, path) -> None:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(t.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected: dict[str, tuple[int, ...]] | None = None) -> ParameterStore:
    """Read a checkpoint; ``expected`` maps names to shapes the caller requires."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CorruptCheckpoint(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    store = ParameterStore()
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(buf):
            raise CorruptCheckpoint(f"{path}: truncated name")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I")
        size = int(np.prod(dims)) * 4
        if pos + size > len(buf):
            raise CorruptCheckpoint(f"{path}: truncated data for {name!r}")
        data = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims)
        pos += size
        store.add(name, data.astype(np.float32))
    if pos != len(buf):
        raise CorruptCheckpoint(f"{path}: {len(buf) - pos} trailing bytes")
    if expected is not None and store.shapes() != {k: tuple(v) for k, v in expected.items()}:
        raise ShapeConflict(f"{path}: parameter shapes do not match the model architecture")
    return store

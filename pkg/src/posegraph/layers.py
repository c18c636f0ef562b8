"""Parameter registry, convolution blocks and embedding helpers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, apply_activation, conv2d_raw


@dataclass
class RegistryEntry:
    tensor: Tensor
    trainable: bool


class ParamRegistry:
    """Named map of parameter tensors with a trainable/frozen flag each.

    Names are unique, slash-namespaced paths (e.g. "base/enc1/down/kernel").
    Frozen entries are never touched by optimizers; `checksum` hashes data
    bytes in sorted-name order so freezes can be verified after a run.
    """

    def __init__(self):
        self.entries: Dict[str, RegistryEntry] = {}

    def register(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=trainable, name=name)
        self.entries[name] = RegistryEntry(t, trainable)
        return t

    def adopt(self, name: str, t: Tensor, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t.name = name
        t.requires_grad = trainable
        self.entries[name] = RegistryEntry(t, trainable)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def tensor(self, name: str) -> Tensor:
        return self.entries[name].tensor

    def items(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name in sorted(self.entries):
            if name.startswith(prefix):
                yield name, self.entries[name].tensor

    def trainable_items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in sorted(self.entries):
            e = self.entries[name]
            if e.trainable:
                yield name, e.tensor

    def freeze(self, prefix: str = ""):
        for name, e in self.entries.items():
            if name.startswith(prefix):
                e.trainable = False
                e.tensor.requires_grad = False

    def zero_grad(self):
        for e in self.entries.values():
            e.tensor.grad = None

    def state(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items(prefix)}

    def load_state(self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True):
        wanted = [n for n in self.entries if n.startswith(prefix)]
        for name in wanted:
            if name not in state:
                if strict:
                    raise ContractViolation(f"checkpoint is missing tensor {name!r}")
                continue
            t = self.entries[name].tensor
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ContractViolation(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {t.data.shape}")
            t.data = arr.copy()

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name, t in self.items(prefix):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def count(self, prefix: str = "", trainable_only: bool = False) -> int:
        total = 0
        for name, e in self.entries.items():
            if name.startswith(prefix) and (e.trainable or not trainable_only):
                total += e.tensor.data.size
        return total


@dataclass
class ConvBlock:
    """k x k convolution + bias + pointwise activation, SAME padding.

    stride=1 keeps the spatial dims; stride=2 halves them.
    """

    kernel: Tensor
    bias: Tensor
    activation: str = "gelu"
    stride: int = 1

    def __post_init__(self):
        k, k2, cin, cout = self.kernel.data.shape
        if k != k2 or k % 2 == 0:
            raise ContractViolation(f"kernel must be square and odd, got {self.kernel.data.shape}")
        if self.bias.data.shape != (cout,):
            raise ContractViolation(f"bias shape {self.bias.data.shape} != ({cout},)")

    @property
    def in_channels(self) -> int:
        return self.kernel.data.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.data.shape[3]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


def conv2d(x: Tensor, block: ConvBlock) -> Tensor:
    """Apply a ConvBlock to an NHWC tensor (the batch axis may be size 1)."""
    y = conv2d_raw(x, block.kernel, stride=block.stride)
    y = y + block.bias
    return apply_activation(y, block.activation)


def conv_block(reg: ParamRegistry, name: str, k: int, cin: int, cout: int,
               rng: np.random.Generator, stride: int = 1, activation: str = "gelu",
               init: str = "he", trainable: bool = True) -> ConvBlock:
    """Create a ConvBlock and register its parameters under `name/`."""
    if init == "he":
        scale = np.sqrt(2.0 / (k * k * cin))
        kernel = rng.normal(0.0, scale, size=(k, k, cin, cout))
    elif init == "zero":
        kernel = np.zeros((k, k, cin, cout))
    else:
        raise ContractViolation(f"unknown init {init!r}")
    kt = reg.register(f"{name}/kernel", kernel.astype(np.float32), trainable)
    bt = reg.register(f"{name}/bias", np.zeros(cout, dtype=np.float32), trainable)
    return ConvBlock(kt, bt, activation=activation, stride=stride)


@dataclass
class Linear:
    weight: Tensor  # (din, dout)
    bias: Tensor    # (dout,)

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.weight) + self.bias


def linear(reg: ParamRegistry, name: str, din: int, dout: int,
           rng: np.random.Generator, trainable: bool = True, init: str = "he") -> Linear:
    if init == "zero":
        w = np.zeros((din, dout))
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout))
    wt = reg.register(f"{name}/weight", w.astype(np.float32), trainable)
    bt = reg.register(f"{name}/bias", np.zeros(dout, dtype=np.float32), trainable)
    return Linear(wt, bt)


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Classic sinusoidal code of a 1D position vector, shape (len, dim)."""
    positions = np.asarray(positions, dtype=np.float64)
    out = np.zeros((positions.shape[0], dim), dtype=np.float64)
    half = dim // 2
    if half == 0:
        out[:, 0] = np.sin(positions)
        return out.astype(np.float32)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = positions[:, None] * freqs[None, :]
    out[:, 0:2 * half:2] = np.sin(args)
    out[:, 1:2 * half:2] = np.cos(args)
    if dim % 2:
        out[:, -1] = np.sin(positions * freqs[-1] / 10.0)
    return out.astype(np.float32)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion timesteps, shape (B, dim)."""
    return sincos_1d(np.asarray(t, dtype=np.float64), dim)

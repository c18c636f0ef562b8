"""Dense tensors with a recorded-tape reverse-mode gradient engine.

Working precision is float32 everywhere; float64 shows up only when a
caller (the finite-difference checker) explicitly builds float64 clones
of a model fragment. The op set is exactly what the models in this repo
need -- this is not a general autodiff library.

Determinism: every op is a plain numpy computation with a fixed reduction
order (numpy pairwise summation, single BLAS call per matmul), so repeated
evaluation of the same graph with the same inputs is bit-identical.
Gradients of a batched forward accumulate over the batch axis inside one
numpy reduction, i.e. in batch-index order.
"""

from __future__ import annotations

import itertools
import threading
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .errors import ContractViolation, NonFiniteLossError

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "add",
    "mul",
    "matmul",
    "conv2d_raw",
    "apply_activation",
    "relu",
    "gelu",
    "silu",
    "clip01",
    "reshape",
    "transpose",
    "concat",
    "sum_",
    "mean_",
    "upsample2x",
    "embedding_lookup",
    "mse",
    "ACTIVATIONS",
]

ACTIVATIONS = ("identity", "relu", "gelu", "silu")

_STATE = threading.local()
_SEQ = itertools.count()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


class Tensor:
    """A numpy array plus the tape bookkeeping needed for backward().

    `data` is row-major and float32 unless the caller explicitly asked for
    float64. `grad`, once populated, always matches `data` in shape/dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None, op: str = "leaf", _parents=(), _backward=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.op = op
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward -------------------------------------------------------
    def backward(self):
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        Only valid on scalar outputs. Raises NonFiniteLossError with the
        first non-finite node (in recording order) if the loss is not
        finite.
        """
        if self.data.size != 1:
            raise ContractViolation(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            culprit = _first_nonfinite_ancestor(self)
            raise NonFiniteLossError(
                "loss is non-finite; first non-finite node is "
                f"op={culprit.op!r} name={culprit.name!r} shape={culprit.data.shape}"
            )
        topo = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node.grad = None  # free intermediate grads; leaves keep theirs


def _topo_order(root: Tensor):
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _first_nonfinite_ancestor(root: Tensor) -> Tensor:
    nodes, visited, stack = [], {id(root)}, [root]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for parent in node._parents:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append(parent)
    bad = [n for n in nodes if not np.isfinite(n.data).all()]
    return min(bad, key=lambda n: n._seq) if bad else root


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data: np.ndarray, parents, backward, op: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, op=op, dtype=data.dtype,
                     _parents=tuple(parents), _backward=None)
        out._backward = backward(out)
        return out
    return Tensor(data, requires_grad=False, op=op, dtype=data.dtype)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def constant(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name, dtype=dtype)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, getattr(b, "dtype", np.float32))
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    data = a.data + b.data

    def backward(out):
        def bw(g):
            _accumulate(a, _unbroadcast(g, a.data.shape))
            _accumulate(b, _unbroadcast(g, b.data.shape))
        return bw

    return _node(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, getattr(b, "dtype", np.float32))
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    data = a.data * b.data

    def backward(out):
        def bw(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
        return bw

    return _node(data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = np.matmul(a.data, b.data)

    def backward(out):
        def bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accumulate(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accumulate(b, _unbroadcast(gb, b.data.shape))
        return bw

    return _node(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(out):
        def bw(g):
            _accumulate(x, g.reshape(x.data.shape))
        return bw

    return _node(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(out):
        def bw(g):
            _accumulate(x, np.ascontiguousarray(g.transpose(inverse)))
        return bw

    return _node(data, (x,), backward, "transpose")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        def bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])
        return bw

    return _node(data, tuple(parts), backward, "concat")


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        def bw(g):
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.data.shape).astype(x.dtype, copy=True))
        return bw

    return _node(np.asarray(data), (x,), backward, "sum")


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    inv = np.asarray(1.0 / count, dtype=x.dtype)

    def backward(out):
        def bw(g):
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg * inv, x.data.shape).astype(x.dtype, copy=True))
        return bw

    return _node(np.asarray(data), (x,), backward, "mean")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over every element; the shapes must agree."""
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"mse shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = add(a, mul(b, -1.0))
    return mean_(mul(diff, diff))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(out):
        def bw(g):
            _accumulate(x, g * mask)
        return bw

    return _node(data, (x,), backward, "relu")


def gelu(x: Tensor) -> Tensor:
    # exact form x * Phi(x); ndtr returns float64, cast back
    phi = ndtr(x.data).astype(x.dtype)
    data = x.data * phi

    def backward(out):
        def bw(g):
            pdf = np.exp(-0.5 * x.data.astype(np.float64) ** 2) / np.sqrt(2 * np.pi)
            local = phi + x.data * pdf.astype(x.dtype)
            _accumulate(x, g * local)
        return bw

    return _node(data, (x,), backward, "gelu")


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(out):
        def bw(g):
            local = sig * (1.0 + x.data * (1.0 - sig))
            _accumulate(x, g * local.astype(x.dtype))
        return bw

    return _node(data.astype(x.dtype), (x,), backward, "silu")


def apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "identity":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "silu":
        return silu(x)
    raise ContractViolation(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def clip01(x: Tensor) -> Tensor:
    """Clamp to [0, 1] with pass-through gradient on the closed interval."""
    data = np.clip(x.data, 0.0, 1.0)
    mask = (x.data >= 0.0) & (x.data <= 1.0)

    def backward(out):
        def bw(g):
            _accumulate(x, g * mask)
        return bw

    return _node(data, (x,), backward, "clip01")


# ---------------------------------------------------------------------------
# structured ops


def conv2d_raw(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """SAME-padded 2D convolution on NHWC input with (k,k,Cin,Cout) weight.

    Odd kernel only. stride=1 preserves the spatial dims; stride=s divides
    them (H, W must be divisible by s).
    """
    if x.data.ndim != 4:
        raise ContractViolation(f"conv2d expects NHWC input, got ndim={x.data.ndim}")
    k, k2, cin, cout = weight.data.shape
    if k != k2 or k % 2 == 0:
        raise ContractViolation(f"conv2d kernel must be square with odd size, got {weight.data.shape}")
    batch, h, w, cx = x.data.shape
    if cx != cin:
        raise ContractViolation(f"conv2d channel mismatch: input has {cx}, kernel expects {cin}")
    if h % stride or w % stride:
        raise ContractViolation(f"spatial dims {(h, w)} not divisible by stride {stride}")

    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(batch * ho * wo, k * k * cin)
    wflat = weight.data.reshape(k * k * cin, cout)
    data = (cols @ wflat).reshape(batch, ho, wo, cout)

    def backward(out):
        def bw(g):
            gflat = g.reshape(-1, cout)
            if weight.requires_grad:
                _accumulate(weight, (cols.T @ gflat).reshape(weight.data.shape))
            if x.requires_grad:
                gcols = (gflat @ wflat.T).reshape(batch, ho, wo, k, k, cin)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
                _accumulate(x, gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp)
        return bw

    return _node(data, (x, weight), backward, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling on NHWC input."""
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(out):
        def bw(g):
            b, h2, w2, c = g.shape
            _accumulate(x, g.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))
        return bw

    return _node(data, (x,), backward, "upsample2x")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise ContractViolation("embedding ids out of range")
    data = table.data[ids]

    def backward(out):
        def bw(g):
            if table.requires_grad:
                gt = np.zeros_like(table.data)
                np.add.at(gt, ids, g)
                _accumulate(table, gt)
        return bw

    return _node(data, (table,), backward, "embedding")

"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` created by an operation remembers its parents and a
closure mapping the output gradient to parent gradients.  :func:`backward`
orders the graph into a :class:`Tape` (inputs before the operations that
consume them) and walks it in reverse.

Only leaf tensors (and tensors flagged with :meth:`Tensor.retain_grad`)
keep ``.grad`` after a backward pass; gradients accumulate until
:meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand extents do not compose."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None,
                 op: str = "", _copy: bool = True):
        if not _copy and isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = _parents
        self._backward: Optional[Callable] = _backward
        self._retain = False
        self.op = op

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op output, wiring it into the graph when any parent needs grad."""
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op,
                      _copy=False)
    return Tensor(data, op=op, _copy=False)


class Tape:
    """Topologically ordered record of the operations leading to a tensor."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Accumulate dloss/dt into ``t.grad`` for every leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    tape = tape or Tape.record(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"backward of {node.op or 'leaf'}")
        if node.is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (no broadcasting except against Python scalars)
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    a = as_tensor(a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad**p  # a non-finite result is reported by make_result
    return make_result(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(np.mean(a.data), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse everything after the leading (batch) axis."""
    if a.ndim < 2:
        raise ShapeError("flatten expects a batched tensor (N, ...)")
    return reshape(a, (a.shape[0], -1))


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def getitem(a: Tensor, key) -> Tensor:
    shape = a.shape
    advanced = _is_advanced(key)

    def back(g):
        z = np.zeros(shape)
        if advanced:
            np.add.at(z, key, g)
        else:
            z[key] += g
        return (z,)

    return make_result(np.array(a.data[key], dtype=np.float64), (a,), back, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat along axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def concat_channels(tensors: Sequence[Tensor], batched: bool = True) -> Tensor:
    """Join feature maps along the channel axis (1 for batched maps, else 0)."""
    return concat(tensors, axis=1 if batched else 0)

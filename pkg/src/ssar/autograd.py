"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every operation applied to a
tensor that requires gradients records its parents and a backward rule on the
output. :meth:`Tensor.backward` replays the recorded graph in reverse
topological order and accumulates gradients into the leaves.

Layer-level operations with fused backward rules live in :mod:`ssar.nn.functional`;
this module holds the generic primitives they are composed with.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

DTYPES = {"float32": np.float32, "float64": np.float64}

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor with {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def assign_(self, values: np.ndarray) -> None:
        """In-place update of the underlying buffer; reserved for optimizers and checkpoint loading."""
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {values.shape} into {self.data.shape}")
        self.data[...] = values

    # -- graph replay -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a single-element loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; long recurrent graphs exceed Python's recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, name: str) -> Tensor:
    """Wrap ``data`` as the output of an operation, recording the graph edge when needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = name
    return out


def tensor_create(shape: Sequence[int], values: Iterable[float], dtype: str = "float32") -> Tensor:
    """Build a row-major tensor from a flat list of values."""
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    flat = np.asarray(list(values), dtype=DTYPES[dtype])
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return Tensor(flat.reshape(shape))


# -- elementwise ----------------------------------------------------------


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(lead + i for i, d in enumerate(shape) if d == 1 and g.shape[lead + i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out != a.shape:
        raise ShapeError(f"{opname}: cannot broadcast {b.shape} onto {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _check_broadcast(a, b, "max")
    take_a = a.data >= b.data

    def backward(g):
        return g * take_a, _reduce_to(g * ~take_a, b.shape)

    return make_op(np.where(take_a, a.data, b.data), (a, b), backward, "max")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "max": maximum}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return make_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- linear algebra and reductions ----------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return make_op(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype),),
        "mean",
    )


def sum_axis(a: Tensor, axis: int | tuple[int, ...], keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g.reshape(out.shape), shape).copy(),)

    return make_op(out if keepdims else out.squeeze(axis), (a,), backward, "sum_axis")


# -- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
        "transpose",
    )


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    picked = np.array(a.data[index])
    picked_shape = picked.shape  # 0-d for scalar picks; tensors store those as (1,)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g.reshape(picked_shape))
        return (full,)

    return make_op(picked, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))

    return make_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


def gather_rows(src: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a rank-2 tensor; index -1 yields a zero row."""
    if src.ndim != 2:
        raise ShapeError(f"gather_rows expects a rank-2 tensor, got {src.shape}")
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    out = np.zeros((index.size, src.shape[1]), dtype=src.dtype)
    out[valid] = src.data[index[valid]]
    n = src.shape[0]

    def backward(g):
        full = np.zeros((n, g.shape[1]), dtype=g.dtype)
        np.add.at(full, index[valid], g[valid])
        return (full,)

    return make_op(out, (src,), backward, "gather_rows")

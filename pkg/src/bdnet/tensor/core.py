"""Dense tensor with a recorded graph and reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator contract."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the discrete decisions (activation masks, orderings) taken by
    operators while the context is active.

    Finite-difference checks use this to discard probes that cross a kink.
    """
    prev = getattr(_state, "branches", None)
    log: list[np.ndarray] = []
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def note_branch(decision: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.array(decision, copy=True))


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Image tensors use the N x C x H x W layout.  Gradients of leaves accumulate
    in ``grad`` across calls to :meth:`backward` until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- construction -------------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
        """Wrap an operator result, recording it when any parent tracks gradients."""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.op = op
        parents = tuple(parents)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def zeros(cls, shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    # -- array protocol -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> Tensor:
        """Detached copy in another precision."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation ----------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic (same-shape or scalar operands only) ---------
    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other) -> Tensor:
        return add(neg(self), other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def sum(self) -> Tensor:
        return tensor_sum(self)

    def mean(self) -> Tensor:
        return mul(tensor_sum(self), 1.0 / self.size)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if isinstance(b, np.ndarray) and b.shape != a.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return Tensor.from_op((a.data + b).astype(a.dtype, copy=False), (a,), lambda g: (g,), "add_const")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if isinstance(b, np.ndarray):
        if b.shape != a.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
        c = b.astype(a.dtype, copy=False)
    else:
        c = a.dtype.type(b)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    e = a.dtype.type(exponent)
    return Tensor.from_op(ad**e, (a,), lambda g: (g * e * ad ** (e - 1),), "pow")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=a.dtype), dtype=a.dtype)
    return Tensor.from_op(out, (a,), lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; every other extent must agree."""
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")

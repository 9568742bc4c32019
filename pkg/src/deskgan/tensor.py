"""Minimal reverse-mode autodiff over numpy arrays.

Every backward rule is written in terms of Tensor ops, so gradients can be
differentiated again (``create_graph=True``). The gradient penalty used by
the style model depends on that.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = mode
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """n-dimensional float array that can take part in gradient recording.

    ``grad`` is a plain ndarray of the same shape, filled by :meth:`backward`.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other, self.dtype), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- methods mirroring module functions ------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return power(self, 0.5)

    def backward(self, grad=None, create_graph: bool = False) -> None:
        backward(self, grad, create_graph=create_graph)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# linear structural ops: forward is a fixed linear map, backward its adjoint
# ---------------------------------------------------------------------------

def linear_map(x: Tensor, fwd: Callable[[np.ndarray], np.ndarray],
               adj: Callable[[np.ndarray], np.ndarray], op: str = "linear") -> Tensor:
    """Apply a fixed linear map ``fwd`` whose adjoint is ``adj``.

    Reshapes, transposes, slicing, pooling, upsampling and the augmentation
    warps all go through here; the backward is itself a ``linear_map`` with
    the roles swapped, so any order of differentiation works.
    """

    def _bw(g):
        return (linear_map(g, adj, fwd, op + "_adj"),)

    return Tensor._from_op(fwd(x.data), (x,), _bw, op)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return linear_map(x, lambda a: a.reshape(shape), lambda g: g.reshape(src), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return linear_map(x, lambda a: np.ascontiguousarray(a.transpose(axes)),
                      lambda g: np.ascontiguousarray(g.transpose(inv)), "transpose")


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1)
    out = g.sum(axis=axes, dtype=np.float64, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape).astype(g.dtype)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    if src == shape:
        return x
    return linear_map(x, lambda a: np.ascontiguousarray(np.broadcast_to(a, shape)),
                      lambda g: _sum_to_shape(g, src), "broadcast")


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    if src == shape:
        return x
    return linear_map(x, lambda a: _sum_to_shape(a, shape),
                      lambda g: np.ascontiguousarray(np.broadcast_to(g, src)), "sum_to")


def getitem(x: Tensor, idx) -> Tensor:
    src, dtype = x.shape, x.dtype

    def adj(g):
        out = np.zeros(src, dtype=dtype)
        np.add.at(out, idx, g)
        return out

    return linear_map(x, lambda a: np.array(a[idx]), adj, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, _bw, "concat")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(a % x.ndim for a in np.atleast_1d(axis))
    kshape = tuple(1 if i in axes else n for i, n in enumerate(src))

    def fwd(a):
        return np.asarray(a.sum(axis=axes, dtype=np.float64, keepdims=keepdims)).astype(a.dtype)

    def adj(g):
        return np.ascontiguousarray(np.broadcast_to(g.reshape(kshape), src))

    return linear_map(x, fwd, adj, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return linear_map(a, np.negative, np.negative, "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        return sum_to(g * b, a.shape), sum_to(g * a, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), _bw, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def _bw(g):
        if exponent == 1.0:
            return (g,)
        return (g * (power(a, exponent - 1.0) * exponent),)

    return Tensor._from_op(np.power(a.data, a.dtype.type(exponent)), (a,), _bw, "pow")


def exp(a: Tensor) -> Tensor:
    def _bw(g):
        return (g * exp(a),)

    return Tensor._from_op(np.exp(a.data), (a,), _bw, "exp")


def log(a: Tensor) -> Tensor:
    def _bw(g):
        return (g * power(a, -1.0),)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)  # out-of-domain values are reported by the finiteness check
    return Tensor._from_op(out, (a,), _bw, "log")


def where_mask(a: Tensor, mask: np.ndarray, other_scale: float = 0.0) -> Tensor:
    """Multiply elements where ``mask`` is false by ``other_scale``; constant mask."""
    scale = np.where(mask, 1.0, other_scale).astype(a.dtype)
    return linear_map(a, lambda x: x * scale, lambda g: g * scale, "mask")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    clipped = np.clip(a.data, lo, hi)
    offset = (clipped - np.where(inside, a.data, 0.0)).astype(a.dtype)
    # inside: pass-through; outside: constant boundary value with zero slope
    return add(where_mask(a, inside), Tensor(offset, dtype=a.dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return Tensor._from_op(a.data @ b.data, (a, b), _bw, "matmul")


# ---------------------------------------------------------------------------
# gradient computation
# ---------------------------------------------------------------------------

class Tape:
    """Recorded operations reachable from some roots, in topological order.

    Every node appears after all of its inputs.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_roots(cls, roots: Sequence[Tensor]) -> "Tape":
        order, seen = [], set()
        for root in roots:
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
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        return cls(order)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        return cls.from_roots([root])

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _run(roots: Sequence[Tensor], seeds: Sequence[Tensor], create_graph: bool):
    order = Tape.from_roots(roots).nodes
    grads: dict = {}
    for r, s in zip(roots, seeds):
        grads[id(r)] = s if id(r) not in grads else grads[id(r)] + s
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    return order, grads


def backward(loss: Tensor, grad=None, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if grad is None:
        if loss.size != 1:
            raise ValueError("backward() without an explicit grad needs a scalar loss")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    seed = grad if isinstance(grad, Tensor) else Tensor(grad, dtype=loss.dtype)
    order, grads = _run([loss], [seed], create_graph)
    for node in order:
        if node._backward is None and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g.data.copy() if node.grad is None else node.grad + g.data


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False) -> list:
    """Return d(outputs)/d(inputs) as Tensors without touching ``.grad``."""
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None:
        grad_outputs = [Tensor(np.ones_like(o.data), dtype=o.dtype) for o in outputs]
    _, grads = _run(outputs, list(grad_outputs), create_graph)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data), dtype=t.dtype)
        out.append(g)
    return out


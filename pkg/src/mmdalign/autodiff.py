"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation on tracked tensors records a node with a
backward closure, and ``Tensor.backward()`` walks the tape in reverse
topological order. The graph is rebuilt on every training step, which keeps
variable-shape losses (per-sentence kernel sums, landmark sampling) simple.

Everything is double precision; the finite-difference test suite depends
on that.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes incompatible with an operation; names the op kind."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{kind}: incompatible shapes {joined}")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 ndarray plus an optional gradient and tape node.

    Gradient accumulation is additive: a tensor consumed k times receives
    the sum of the k contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._backward_fn = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- graph construction ----------------------------------------------------

    @staticmethod
    def _result(data, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    def backward(self):
        """Backpropagate from a scalar loss; fills ``grad`` on every
        reachable tensor that requires gradients."""
        if self.data.ndim != 0:
            raise ValueError(
                f"backward: loss must be a scalar, got shape {self.shape}"
            )
        # iterative postorder; graphs routinely exceed the recursion limit
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; scale by a float")
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms of the free functions ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis=axis)

    def gather(self, indices):
        return gather(self, indices)


def as_tensor(x) -> Tensor:
    """Coerce a value to a (constant) Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# -- elementwise arithmetic ------------------------------------------------------


def _check_broadcast(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(kind, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("subtract", a, b)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product; covers scalar-scale when one side is a float."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None

    def backward_fn(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._result(a.data @ b.data, (a, b), backward_fn)


# -- elementwise nonlinearities --------------------------------------------------


def exp(t) -> Tensor:
    t = as_tensor(t)
    out_data = np.exp(t.data)

    def backward_fn(g):
        t._accumulate(g * out_data)

    return Tensor._result(out_data, (t,), backward_fn)


def log(t) -> Tensor:
    t = as_tensor(t)

    def backward_fn(g):
        t._accumulate(g / t.data)

    return Tensor._result(np.log(t.data), (t,), backward_fn)


def sqrt(t) -> Tensor:
    """Elementwise square root; subgradient 0 at exactly 0 (keeps the
    L2-norm loss finite when a distance collapses to zero)."""
    t = as_tensor(t)
    out_data = np.sqrt(t.data)

    def backward_fn(g):
        safe = np.where(out_data > 0.0, out_data, 1.0)
        t._accumulate(np.where(out_data > 0.0, 0.5 * g / safe, 0.0))

    return Tensor._result(out_data, (t,), backward_fn)


def relu(t) -> Tensor:
    t = as_tensor(t)

    def backward_fn(g):
        t._accumulate(g * (t.data > 0.0))

    return Tensor._result(np.maximum(t.data, 0.0), (t,), backward_fn)


# -- reductions -------------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(t, axis=None, keepdims=False) -> Tensor:
    t = as_tensor(t)
    axes = _normalize_axes(axis, t.ndim)
    out_data = t.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        gg = g
        if axes is not None and not keepdims:
            for a in axes:
                gg = np.expand_dims(gg, a)
        t._accumulate(np.broadcast_to(gg, t.shape))

    return Tensor._result(out_data, (t,), backward_fn)


def tensor_mean(t, axis=None, keepdims=False) -> Tensor:
    t = as_tensor(t)
    axes = _normalize_axes(axis, t.ndim)
    if axes is None:
        count = t.size
    else:
        count = int(np.prod([t.shape[a] for a in axes]))
    out_data = t.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        gg = g / count
        if axes is not None and not keepdims:
            for a in axes:
                gg = np.expand_dims(gg, a)
        t._accumulate(np.broadcast_to(gg, t.shape))

    return Tensor._result(out_data, (t,), backward_fn)


def sq_norm(t) -> Tensor:
    """Squared L2 norm of all entries."""
    t = as_tensor(t)
    return tensor_sum(mul(t, t))


# -- shape manipulation -------------------------------------------------------------


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)

    def backward_fn(g):
        t._accumulate(g.reshape(t.shape))

    return Tensor._result(t.data.reshape(shape), (t,), backward_fn)


def transpose(t, axes=None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        t._accumulate(g.transpose(inverse))

    return Tensor._result(t.data.transpose(axes), (t,), backward_fn)


def concatenate(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concatenate: need at least one tensor")
    for p in parts[1:]:
        a, b = parts[0].shape, p.shape
        if len(a) != len(b) or any(
            i != axis % len(a) and a[i] != b[i] for i in range(len(a))
        ):
            raise ShapeMismatchError("concatenate", a, b)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                p._accumulate(g[tuple(index)])

    return Tensor._result(data, tuple(parts), backward_fn)


def gather(t, indices) -> Tensor:
    """Row lookup along axis 0 (embedding lookup). ``indices`` may be any
    integer array shape; the adjoint scatter-adds into the source rows."""
    t = as_tensor(t)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"gather: indices must be integers, got {idx.dtype}")
    n_rows = t.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(
            f"gather: index out of range for {n_rows} rows "
            f"(got min {idx.min()}, max {idx.max()})"
        )

    def backward_fn(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        t._accumulate(full)

    return Tensor._result(t.data[idx], (t,), backward_fn)


# -- row-normalizing ops ---------------------------------------------------------------


def softmax(t, axis: int = -1) -> Tensor:
    """Row softmax with max-subtraction for stability."""
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        t._accumulate(out_data * (g - inner))

    return Tensor._result(out_data, (t,), backward_fn)


def log_softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward_fn(g):
        soft = np.exp(out_data)
        t._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out_data, (t,), backward_fn)


def layer_norm(t, gain, bias, eps: float = 1e-6) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias."""
    t, gain, bias = as_tensor(t), as_tensor(gain), as_tensor(bias)
    d = t.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError("layer-norm", t.shape, gain.shape, bias.shape)
    mu = t.data.mean(axis=-1, keepdims=True)
    var = ((t.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (t.data - mu) * inv_std
    out_data = gain.data * x_hat + bias.data

    def backward_fn(g):
        if t.requires_grad:
            g_hat = g * gain.data
            m1 = g_hat.mean(axis=-1, keepdims=True)
            m2 = (g_hat * x_hat).mean(axis=-1, keepdims=True)
            t._accumulate((g_hat - m1 - x_hat * m2) * inv_std)
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * x_hat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))

    return Tensor._result(out_data, (t, gain, bias), backward_fn)


def dropout(t, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    t = as_tensor(t)
    if rate == 0.0:
        return t
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)

    def backward_fn(g):
        t._accumulate(g * keep)

    return Tensor._result(t.data * keep, (t,), backward_fn)


# -- parameter initialisation -----------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, shape: tuple, name: str = "") -> Tensor:
    """Glorot-uniform weight matrix; fan in/out from the first two dims."""
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str = "") -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name: str = "") -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)

"""Reverse-mode automatic differentiation on dense numpy buffers.

A Tensor wraps one contiguous ndarray (float32 by default, float64 in
verification mode) and records the operations applied to it.  Calling
``backward()`` on a scalar loss walks the tape once in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad`` set.  Tensors are treated as immutable once produced by
an op; the tape for one forward pass is single threaded.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]

# per-thread so evaluation workers can disable taping independently
_tape = threading.local()


@contextmanager
def no_grad():
    """Disable tape recording (inference / pure evaluation)."""
    prev = getattr(_tape, "enabled", True)
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def grad_enabled() -> bool:
    return getattr(_tape, "enabled", True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # ------------------------------------------------------------------
    # basic introspection

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph plumbing

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar; fills .grad on reachable tensors."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # op construction helpers

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = any(p.requires_grad for p in parents) and grad_enabled()
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def _coerce(other, like: "Tensor") -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.data.dtype))

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._make(-a.data, (a,), bw)

    def __sub__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return Tensor._coerce(other, self) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._coerce(other, self)
        a, b = self, other
        out_data = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._make(out_data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._coerce(other, self) / self

    def __pow__(self, exponent: Scalar) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data ** exponent

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._make(out_data, (a,), bw)

    # ------------------------------------------------------------------
    # elementwise functions

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * out_data)

        return Tensor._make(out_data, (a,), bw)

    def log(self) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._make(np.log(a.data), (a,), bw)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * 0.5 / out_data)

        return Tensor._make(out_data, (a,), bw)

    def abs(self) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * np.sign(a.data))

        return Tensor._make(np.abs(a.data), (a,), bw)

    def clip(self, lo: Optional[Scalar] = None, hi: Optional[Scalar] = None) -> "Tensor":
        """Clamp values; gradient passes through the un-clipped region only."""
        a = self
        out_data = np.clip(a.data, lo, hi)
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data >= lo
        if hi is not None:
            inside &= a.data <= hi

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * inside)

        return Tensor._make(out_data, (a,), bw)

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
                return
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._make(out_data, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ------------------------------------------------------------------
    # shape ops

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.shape

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old_shape))

        return Tensor._make(a.data.reshape(shape), (a,), bw)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        a = self
        axes = tuple(axes)
        inv = np.argsort(axes)

        def bw(g):
            if a.requires_grad:
                a._accumulate(np.ascontiguousarray(g.transpose(inv)))

        return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[idx] = g
                a._accumulate(full)

        return Tensor._make(np.ascontiguousarray(a.data[idx]), (a,), bw)

    # ------------------------------------------------------------------
    # linear algebra

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")

        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), bw)

    def __matmul__(self, other) -> "Tensor":
        return self.matmul(other)


class Parameter(Tensor):
    """A trainable tensor; named at module registration time."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._make(np.concatenate([t.data for t in parts], axis=axis), parts, bw)


def unary_op(x: Tensor, fwd: Callable[[np.ndarray], np.ndarray],
             dfdx: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    """Build an elementwise primitive from fwd(x) and dfdx(x, out)."""
    out_data = fwd(x.data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * dfdx(x.data, out_data))

    return Tensor._make(out_data, (x,), bw)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


def check_finite(t: Tensor, where: str) -> Tensor:
    """Raise if `t` contains NaN/Inf; forward/backward values must stay finite."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {where}")
    return t


def gradient_check(loss_fn: Callable[[], Tensor],
                   leaves: Sequence[Tensor],
                   h: float = 1e-5,
                   max_entries_per_tensor: int = 0,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Verification-mode gradient check against central finite differences.

    ``loss_fn`` rebuilds the scalar loss from the current contents of the
    ``leaves`` tensors (float64, requires_grad).  Every checked entry is
    perturbed in place and the analytic gradient is compared with
    (f(x+h) - f(x-h)) / 2h; the return value is the largest scaled
    relative error ``|a - f| / max(1, |a|, |f|)``.  Set
    ``max_entries_per_tensor`` to subsample large tensors (0 checks every
    entry).
    """
    for t in leaves:
        if t.data.dtype != np.float64:
            raise ValueError("gradient_check requires float64 leaves")
        t.requires_grad = True
        t.zero_grad()
    loss = loss_fn()
    if loss.data.dtype != np.float64:
        raise ValueError("gradient_check requires a float64 graph")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in leaves]

    worst = 0.0
    for t, an in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        n = flat.size
        if max_entries_per_tensor and n > max_entries_per_tensor:
            picker = rng if rng is not None else np.random.default_rng(0)
            idxs = picker.choice(n, size=max_entries_per_tensor, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            f_plus = float(loss_fn().data)
            flat[i] = keep - h
            f_minus = float(loss_fn().data)
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            a = float(an_flat[i])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            worst = max(worst, err)
    return worst

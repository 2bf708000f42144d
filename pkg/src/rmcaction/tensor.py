"""Dense float tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient buffer.
Operations record vector-Jacobian closures on their outputs; calling
``backward()`` on a scalar walks the graph in reverse topological order
and accumulates gradients into every reachable leaf that requires them.
Intermediate nodes never retain gradients, so calling ``backward()``
twice on the same graph adds exactly twice the single-pass gradient to
the leaves.

Everything is float32 by default; :func:`using_dtype` switches new
tensors to float64 for tighter finite-difference checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    """Dtype used for newly created tensors."""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype: {dtype!r} (float32 or float64 only)")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the default tensor dtype."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables graph recording.

    Inside the context, operation outputs carry no parents and no
    ``requires_grad`` flag, so forward passes allocate nothing beyond
    their results. Nestable; the previous state is restored on exit.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


# A parent entry is (input tensor, vjp) where vjp maps the adjoint of the
# output to the adjoint contribution of that input.
Vjp = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    ``grad`` is allocated lazily on the first backward pass that reaches
    this tensor as a leaf; it always has the same shape and dtype as
    ``data``. Graph tensors are treated as immutable: no operation
    mutates the ``data`` of one of its inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tuple["Tensor", Vjp], ...] = ()

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # ------------------------------------------------------------------
    # autodiff engine

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf.

        ``self`` must be a scalar. Repeated calls without resetting the
        leaf gradients accumulate.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, vjp in node._parents:
                    contrib = vjp(g)
                    prev = adjoint.get(id(parent))
                    adjoint[id(parent)] = contrib if prev is None else prev + contrib
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    # ------------------------------------------------------------------
    # operator sugar (delegates to the module-level ops)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def moveaxis(self, src, dst):
        return moveaxis(self, src, dst)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a hierarchical name.

    Names are assigned when a model's parameter tree is walked; they are
    unique within a model and index checkpoint records.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _result(data: np.ndarray, parents: Sequence[Tuple[Tensor, Vjp]]) -> Tensor:
    """Wrap an op result, keeping vjps only for inputs that need them."""
    out = Tensor.__new__(Tensor)
    out.data = data
    if _GRAD_ENABLED:
        kept = tuple((t, fn) for t, fn in parents if t.requires_grad)
    else:
        kept = ()
    out._parents = kept
    out.requires_grad = bool(kept)
    out.grad = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# elementwise / structural operations


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        data = a.data + np.asarray(b, dtype=a.dtype)
        return _result(data, [(a, lambda g: g)])
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        data = a.data - np.asarray(b, dtype=a.dtype)
        return _result(data, [(a, lambda g: g)])
    _check_same_shape("sub", a, b)
    return _result(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * np.asarray(s, dtype=a.dtype), [(a, lambda g: g * s)])
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, [(x, lambda g: g * (out > 0))])


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        data = np.asarray(x.data.sum(), dtype=x.dtype)
        return _result(data, [(x, lambda g: np.broadcast_to(g, shape))])
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    data = x.data.sum(axis=axes)

    def vjp(g):
        expanded = np.expand_dims(g, axes)
        return np.broadcast_to(expanded, shape)

    return _result(data, [(x, vjp)])


def tmean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        data = np.asarray(x.data.mean(), dtype=x.dtype)
        return _result(data, [(x, lambda g: np.broadcast_to(g / n, shape))])
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([shape[a] for a in axes]))
    data = x.data.mean(axis=axes)

    def vjp(g):
        expanded = np.expand_dims(g / n, axes)
        return np.broadcast_to(expanded, shape)

    return _result(data, [(x, vjp)])


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), [(x, lambda g: g.reshape(old))])


def flatten(x: Tensor, from_axis: int = 1) -> Tensor:
    """Collapse all axes from ``from_axis`` onward into one."""
    keep = x.shape[:from_axis]
    return reshape(x, keep + (-1,))


def moveaxis(x: Tensor, src, dst) -> Tensor:
    data = np.moveaxis(x.data, src, dst)
    return _result(data, [(x, lambda g: np.moveaxis(g, dst, src))])


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows along ``axis``; gradient scatter-adds back."""
    idx = np.asarray(indices)
    data = np.take(x.data, idx, axis=axis)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            out_m = np.moveaxis(out, axis, 0)
            np.add.at(out_m, idx, np.moveaxis(g, axis, 0))
        return out

    return _result(data, [(x, vjp)])


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = np.abs(x.data)
    inner = ax < 1
    data = np.where(inner, 0.5 * x.data * x.data, ax - x.dtype.type(0.5))

    def vjp(g):
        return g * np.where(inner, x.data, np.sign(x.data))

    return _result(data.astype(x.dtype, copy=False), [(x, vjp)])

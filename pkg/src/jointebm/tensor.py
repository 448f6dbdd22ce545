"""Small dense-tensor layer with tape-based reverse-mode differentiation.

Tensors wrap read-only numpy arrays. Operations are recorded on every active
:class:`Tape` that tracks at least one of their inputs, so gradients can be
taken with respect to parameters (training) or latent inputs (Langevin) by
watching the relevant tensors.

    >>> with Tape() as tape:
    ...     x = tape.watch(Tensor([3.0]))
    ...     y = sum_(square(x))
    >>> tape.gradient(y, [x])[0]
    array([6.])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeError", "NonFiniteError", "DimensionError",
    "matmul", "add", "sub", "mul", "scale", "neg", "add_scalar", "add_bias",
    "leaky_relu", "tanh", "exp", "log", "square", "clamp", "sum_", "split",
    "gaussian_log_density", "backward", "as_tensor",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class TapeError(RuntimeError):
    """Raised on misuse of a tape (e.g. differentiating an unrecorded value)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable dense array. ``data`` is a read-only float ndarray."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data))
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains non-finite values")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        if not np.isfinite(arr).all():
            raise NonFiniteError("operation produced non-finite values")
        t = object.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _active() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Records operations whose inputs depend on watched tensors.

    Tapes are thread-local builders; a tape entered in one thread never sees
    operations executed in another.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}
        self.roots: list[Tensor] = []

    def watch(self, t: Tensor) -> Tensor:
        if not isinstance(t, Tensor):
            raise TypeError("can only watch Tensor objects")
        if id(t) not in self._tracked:
            self._tracked[id(t)] = t
            self.roots.append(t)
        return t

    def watch_all(self, ts: Iterable[Tensor]) -> list[Tensor]:
        return [self.watch(t) for t in ts]

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def __enter__(self):
        _active().append(self)
        return self

    def __exit__(self, *exc):
        stack = _active()
        stack.remove(self)
        return False

    def _record(self, out: Tensor, inputs: tuple, vjp):
        mask = tuple(id(t) in self._tracked for t in inputs)
        if any(mask):
            self._nodes.append(_Node(out, (inputs, mask), vjp))
            self._tracked[id(out)] = out

    def gradient(self, output: Tensor, sources: Sequence[Tensor] | None = None) -> list[np.ndarray]:
        """Reverse-mode gradient of a scalar ``output`` w.r.t. ``sources``.

        ``sources`` defaults to every watched root. Sources that do not
        influence the output receive zeros.
        """
        if output.data.size != 1:
            raise TapeError(f"output must be a scalar, got shape {output.shape}")
        if id(output) not in self._tracked:
            raise TapeError("output was not produced under this tape")
        sources = self.roots if sources is None else list(sources)
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self._nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            inputs, mask = node.inputs
            contribs = node.vjp(g, mask)
            for t, m, c in zip(inputs, mask, contribs):
                if not m:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + c
                else:
                    grads[k] = c
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.dtype).reshape(s.shape))
        return out


def backward(tape: Tape, output: Tensor) -> list[np.ndarray]:
    """Gradients of ``output`` for every root watched on ``tape``, in watch order."""
    return tape.gradient(output, tape.roots)


def _emit(arr: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    for tape in _active():
        tape._record(out, inputs, vjp)
    return out


# --------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, mask):
        return (g @ bd.T if mask[0] else None, ad.T @ g if mask[1] else None)

    return _emit(ad @ bd, (a, b), vjp)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g, m: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g, m: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g, m: (g * bd if m[0] else None, g * ad if m[1] else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * a.dtype.type(c), (a,), lambda g, m: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g, m: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit(a.data + a.dtype.type(c), (a,), lambda g, m: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add: ``x`` is (n, d), ``b`` is (d,)."""
    if b.ndim != 1 or x.ndim != 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    return _emit(x.data + b.data, (x, b), lambda g, m: (g, g.sum(axis=0) if m[1] else None))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    xd = x.data
    # subgradient at 0 is taken from the positive branch
    neg_mask = xd < 0
    out = np.where(neg_mask, xd * xd.dtype.type(slope), xd)
    return _emit(out, (x,), lambda g, m: (np.where(neg_mask, g * slope, g),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g, m: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _emit(y, (x,), lambda g, m: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _emit(np.log(xd), (x,), lambda g, m: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g, m: (2.0 * g * xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = ((xd >= lo) & (xd <= hi)).astype(xd.dtype)
    return _emit(np.clip(xd, lo, hi), (x,), lambda g, m: (g * inside,))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all entries (``axis=None``) or along one axis."""
    xd = x.data
    if axis is None:
        return _emit(np.asarray(xd.sum()), (x,), lambda g, m: (np.broadcast_to(g, xd.shape).copy(),))
    ax = axis % xd.ndim

    def vjp(g, m):
        return (np.broadcast_to(np.expand_dims(g, ax), xd.shape).copy(),)

    return _emit(xd.sum(axis=ax), (x,), vjp)


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split the last axis of a 2-D tensor into consecutive column blocks."""
    if x.ndim != 2 or sum(sizes) != x.shape[1]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover shape {x.shape}")
    outs = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def vjp(g, m, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_emit(x.data[:, lo:hi].copy(), (x,), vjp))
        start = hi
    return outs


def gaussian_log_density(x: Tensor, mean: Tensor, log_var: Tensor) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis.

    A 1-D input gives a scalar; an (n, d) batch gives one value per row.
    """
    _check_same(x, mean, "gaussian_log_density")
    _check_same(x, log_var, "gaussian_log_density")
    d = x.shape[-1]
    quad = mul(square(sub(x, mean)), exp(neg(log_var)))
    inner = add(scale(log_var, -0.5), scale(quad, -0.5))
    return add_scalar(sum_(inner, axis=-1), -0.5 * d * LOG_2PI)

"""Dense float64 tensors with taped reverse-mode differentiation.

Everything downstream (detector heads, graph network, Sinkhorn, losses)
is built from the op set in this module.  Design rules:

* values are numpy float64 arrays, row-major, immutable by convention
  (ops allocate fresh outputs; views are only used where the input is
  never mutated);
* a ``Tape`` records executed ops in order while active; ``backward``
  walks it once in reverse and accumulates vector-Jacobian products,
  summing over fan-out;
* any op producing a non-finite value raises ``NumericError``.

The tape is thread-local: tensors may be shared across threads, a tape
may not.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray

_MASK_FILL = -1e9  # additive mask constant, large but exp-underflows cleanly


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Immutable-by-convention float64 array with a grad-tracking flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of traced ops.

    Use as a context manager; ops executed inside record themselves when
    any input requires gradients.  One tape per thread at a time.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = Tape.active()
        Tape._local.current = self
        return self

    def __exit__(self, *exc):
        Tape._local.current = self._prev
        self._prev = None
        return False

    @staticmethod
    def active() -> "Tape | None":
        return getattr(Tape._local, "current", None)


def _emit(out_data: Array, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Finite-check an op result and record it on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite value produced by an op")
    tape = Tape.active()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if tape is not None and needs:
        tape.nodes.append((out, inputs, vjp))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _emit(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands must be at least 2-d."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data
    return _emit(out, (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi."""
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _emit(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.shape
    return _emit(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, parts, vjp)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints/slices); the VJP scatters into zeros."""
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        z[key] = g
        return (z,)

    return _emit(out, (a,), vjp)


def gather2d(a: Tensor, rows: Array, cols: Array) -> Tensor:
    """Pick entries a[rows[k], cols[k]] from a 2-d tensor; repeats allowed."""
    if a.ndim != 2:
        raise ShapeError(f"gather2d needs a 2-d tensor, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = a.data[rows, cols]
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and normalizations


def _restore_axes(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    """Broadcast a reduced gradient back to ``shape``."""
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape
    return _emit(out, (a,), lambda g: (_restore_axes(g, shape, axis, keepdims),))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size if axis is None else a.data.size // max(out.size, 1)

    def vjp(g):
        return (_restore_axes(g, shape, axis, keepdims) / count,)

    return _emit(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    sm = np.exp(a.data - out)  # softmax along axis
    if not keepdims:
        out = out.squeeze(axis=axis)
    shape = a.shape

    def vjp(g):
        return (sm * _restore_axes(g, shape, axis, keepdims),)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Array]:
    """Reverse-accumulate d(loss)/d(leaf) for every leaf on the tape.

    Returns a dict keyed by leaf tensors (their entries survive because
    intermediate gradients are consumed at the node that produced them).
    A constant loss yields an empty dict.  Raises if the loss is not
    scalar, or if it was traced on a different tape.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    outputs = {id(out) for out, _, _ in tape.nodes}
    if id(loss) not in outputs:
        raise ShapeError("loss is not on this tape")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        by_id.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                by_id[key] = t
    return {by_id[k]: v for k, v in grads.items() if k in by_id}


def grad_check(
    f: Callable[[], Tensor],
    params: "ParamStoreLike",
    step: float = 1e-5,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare taped gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a
    scalar tensor.  Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.  Large tensors can be
    spot-checked by sampling ``samples_per_param`` coordinates.
    """
    with Tape() as tape:
        loss = f()
    analytic = params.named_grads(backward(tape, loss))
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            idxs = range(n)
        else:
            idxs = rng.choice(n, size=samples_per_param, replace=False)
        ana_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


class ParamStoreLike:
    """Protocol stub for grad_check typing; see params.ParamStore."""

    def items(self):  # pragma: no cover - typing aid only
        raise NotImplementedError

    def named_grads(self, grads):  # pragma: no cover
        raise NotImplementedError

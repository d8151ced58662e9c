"""Reverse-mode differentiation over dense numpy arrays.

A ``Tape`` records every operation applied to its ``Tensor`` values; calling
``backward`` on a scalar result walks the record in reverse creation order
(which is a valid reverse topological order) and accumulates gradients
additively at fan-out points.

Conventions, fixed for the whole package:

* dtype is per-tape: float32 for training, float64 for verification.
* broadcasting is trailing-axis only (numpy's right-aligned rule); matmul
  requires ndim >= 2 on both sides -- callers reshape explicitly.
* traced arrays are never mutated in place; every array owned by a Tensor
  is marked read-only.
* arccos clamps its input to [-1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP] before
  evaluation, so its gradient stays finite at the domain edges.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

ARCCOS_CLAMP = 1e-7

__all__ = [
    "Tape", "Tensor", "ShapeMismatch", "DomainViolation",
    "add", "sub", "mul", "div", "matmul", "exp", "log", "sqrt", "power",
    "clamp", "arccos", "absolute", "relu", "gelu", "softplus", "huber",
    "concat", "reshape", "transpose", "gather", "sum_axes", "mean_axes",
    "vecnorm", "softmax", "layernorm", "attention", "grad_check",
    "GradCheckResult",
]


class ShapeMismatch(ValueError):
    """Operand shapes do not conform under the trailing-axis broadcast rule."""


class DomainViolation(ValueError):
    """An input lies outside the documented domain of the op."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Tape:
    """Ordered record of operations; confined to one logical thread.

    ``dtype`` selects 32-bit (training) or 64-bit (verification) arithmetic
    for every tensor created on this tape.  When ``track_kinks`` is on, ops
    with non-differentiable points (clamp, relu, abs, huber, the arccos
    clamp) record how close their inputs came to a kink in ``kink_margin``;
    ``grad_check`` uses this to flag non-checkable sample points.
    """

    def __init__(self, dtype=np.float32, track_kinks: bool = False):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported dtype {dtype}")
        self.nodes: list[Tensor] = []
        self.track_kinks = bool(track_kinks)
        self.kink_margin = float("inf")
        self._params: list[Tensor] = []

    def leaf(self, value, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        data = _freeze(np.array(value, dtype=self.dtype))
        t = Tensor(data, self, requires_grad=requires_grad, name=name)
        self.nodes.append(t)
        if requires_grad:
            self._params.append(t)
        return t

    def constant(self, value) -> "Tensor":
        return self.leaf(value, requires_grad=False)

    def note_kink(self, margin: float) -> None:
        if self.track_kinks and margin < self.kink_margin:
            self.kink_margin = float(margin)

    def backward(self, output: "Tensor") -> None:
        """Accumulate d(output)/d(leaf) into every reachable node's .grad.

        ``output`` must be a scalar on this tape.  Parameters (leaves created
        with requires_grad) that the output does not depend on receive a zero
        gradient of their own shape.
        """
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.data.size != 1:
            raise ValueError(
                f"backward requires a scalar output, got shape {output.data.shape}")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backfn is None:
                continue
            node._backfn(node.grad)
        for p in self._params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


class Tensor:
    """Immutable dense array recorded on a Tape."""

    __slots__ = ("data", "tape", "requires_grad", "grad", "_parents", "_backfn", "name")

    def __init__(self, data, tape, requires_grad=False, parents=(), backfn=None, name=None):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backfn = backfn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"

    # tensor-level gradient path marker: True if a gradient can flow here
    @property
    def _live(self) -> bool:
        return self.requires_grad or self._backfn is not None

    def _accum(self, g: np.ndarray) -> None:
        # gradient arrays are never mutated in place, so views are safe to keep
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.tape), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_axes(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axes(self, axis, keepdims)


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _record(tape: Tape, data: np.ndarray, parents, backfn) -> Tensor:
    live = any(p._live for p in parents)
    t = Tensor(_freeze(np.asarray(data, dtype=tape.dtype)), tape,
               parents=tuple(parents) if live else (),
               backfn=backfn if live else None)
    tape.nodes.append(t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g of a broadcast result back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.data.shape} and {b.data.shape} "
                            "do not conform under trailing-axis broadcasting") from None


# -- arithmetic ----------------------------------------------------------

def add(a, b):
    tape = a.tape if isinstance(a, Tensor) else b.tape
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _binary_shapes("add", a, b)

    def backfn(g):
        if a._live:
            a._accum(_unbroadcast(g, a.data.shape))
        if b._live:
            b._accum(_unbroadcast(g, b.data.shape))
    return _record(tape, a.data + b.data, (a, b), backfn)


def sub(a, b):
    tape = a.tape if isinstance(a, Tensor) else b.tape
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _binary_shapes("sub", a, b)

    def backfn(g):
        if a._live:
            a._accum(_unbroadcast(g, a.data.shape))
        if b._live:
            b._accum(_unbroadcast(-g, b.data.shape))
    return _record(tape, a.data - b.data, (a, b), backfn)


def mul(a, b):
    tape = a.tape if isinstance(a, Tensor) else b.tape
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _binary_shapes("mul", a, b)

    def backfn(g):
        if a._live:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b._live:
            b._accum(_unbroadcast(g * a.data, b.data.shape))
    return _record(tape, a.data * b.data, (a, b), backfn)


def div(a, b):
    tape = a.tape if isinstance(a, Tensor) else b.tape
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _binary_shapes("div", a, b)
    if np.any(b.data == 0):
        raise DomainViolation("div: divisor contains zeros")

    def backfn(g):
        if a._live:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b._live:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _record(tape, a.data / b.data, (a, b), backfn)


def neg(a):
    def backfn(g):
        if a._live:
            a._accum(-g)
    return _record(a.tape, -a.data, (a,), backfn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    b = _as_tensor(b, tape)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: both operands need ndim >= 2, "
                            f"got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.data.shape} and {b.data.shape} "
                            "do not broadcast") from None

    def backfn(g):
        if a._live:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b._live:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))
    return _record(tape, out, (a, b), backfn)


# -- elementwise nonlinearities -------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backfn(g):
        a._accum(g * out)
    return _record(a.tape, out, (a,), backfn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainViolation("log: input must be strictly positive")

    def backfn(g):
        a._accum(g / a.data)
    return _record(a.tape, np.log(a.data), (a,), backfn)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainViolation("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def backfn(g):
        a._accum(g * (0.5 / np.maximum(out, 1e-300)))
    return _record(a.tape, out, (a,), backfn)


def power(a: Tensor, p: float) -> Tensor:
    """a**p for a constant real exponent; domain a > 0 unless p is an integer."""
    p = float(p)
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainViolation(f"power: negative base with non-integer exponent {p}")
    out = np.power(a.data, p)

    def backfn(g):
        a._accum(g * p * np.power(a.data, p - 1.0))
    return _record(a.tape, out, (a,), backfn)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    if lo is None and hi is None:
        raise ValueError("clamp: need at least one bound")
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    if a.tape.track_kinks:
        m = np.inf
        if lo is not None:
            m = min(m, float(np.min(np.abs(a.data - lo))) if a.data.size else np.inf)
        if hi is not None:
            m = min(m, float(np.min(np.abs(a.data - hi))) if a.data.size else np.inf)
        a.tape.note_kink(m)

    def backfn(g):
        a._accum(g * inside)
    return _record(a.tape, out, (a,), backfn)


def arccos(a: Tensor) -> Tensor:
    """arccos with the input clamped away from +-1 so the slope stays finite."""
    lim = 1.0 - ARCCOS_CLAMP
    x = np.clip(a.data, -lim, lim)
    inside = np.abs(a.data) < lim
    if a.tape.track_kinks and a.data.size:
        a.tape.note_kink(float(np.min(np.abs(np.abs(a.data) - lim))))

    def backfn(g):
        a._accum(g * np.where(inside, -1.0 / np.sqrt(1.0 - x * x), 0.0))
    return _record(a.tape, np.arccos(x), (a,), backfn)


def absolute(a: Tensor) -> Tensor:
    if a.tape.track_kinks and a.data.size:
        a.tape.note_kink(float(np.min(np.abs(a.data))))

    def backfn(g):
        a._accum(g * np.sign(a.data))
    return _record(a.tape, np.abs(a.data), (a,), backfn)


def relu(a: Tensor) -> Tensor:
    if a.tape.track_kinks and a.data.size:
        a.tape.note_kink(float(np.min(np.abs(a.data))))

    def backfn(g):
        a._accum(g * (a.data > 0))
    return _record(a.tape, np.maximum(a.data, 0), (a,), backfn)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    phi = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    out = a.data * phi

    def backfn(g):
        dens = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        a._accum(g * (phi + a.data * dens))
    return _record(a.tape, out, (a,), backfn)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def backfn(g):
        a._accum(g / (1.0 + np.exp(-a.data)))
    return _record(a.tape, out, (a,), backfn)


def huber(a: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty: quadratic inside |x| <= delta, linear outside."""
    absx = np.abs(a.data)
    out = np.where(absx <= delta, 0.5 * a.data * a.data, delta * (absx - 0.5 * delta))
    if a.tape.track_kinks and a.data.size:
        a.tape.note_kink(float(np.min(np.abs(absx - delta))))

    def backfn(g):
        a._accum(g * np.where(absx <= delta, a.data, delta * np.sign(a.data)))
    return _record(a.tape, out, (a,), backfn)


# -- structure ------------------------------------------------------------

def concat(tensors, axis: int) -> Tensor:
    tape = tensors[0].tape
    tensors = [_as_tensor(t, tape) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backfn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t._live:
                t._accum(piece)
    return _record(tape, out, tensors, backfn)


def reshape(a: Tensor, shape) -> Tensor:
    def backfn(g):
        a._accum(g.reshape(a.data.shape))
    return _record(a.tape, a.data.reshape(shape), (a,), backfn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backfn(g):
        a._accum(np.transpose(g, inv))
    return _record(a.tape, np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backfn)


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    # basic slices and boolean masks select each element at most once, so the
    # scatter in backward can be a plain assignment; integer fancy indices may
    # repeat and need add.at
    unique = not (isinstance(key, np.ndarray) and key.dtype != bool) and not (
        isinstance(key, tuple) and any(
            isinstance(k, np.ndarray) and k.dtype != bool for k in key))

    def backfn(g):
        full = np.zeros_like(a.data)
        full.setflags(write=True)
        if unique:
            full[key] = g
        else:
            np.add.at(full, key, g)
        a._accum(full)
    return _record(a.tape, out, (a,), backfn)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """np.take along `axis` with a constant integer index array."""
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def backfn(g):
        full = np.zeros_like(a.data)
        full.setflags(write=True)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        a._accum(full)
    return _record(a.tape, out, (a,), backfn)


def sum_axes(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backfn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))
    return _record(a.tape, out, (a,), backfn)


def mean_axes(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return sum_axes(a, axis, keepdims) * (1.0 / n)


def vecnorm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """L2 norm along one axis with a zero (not infinite) gradient at 0."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))

    def backfn(g):
        n = out if keepdims else np.expand_dims(out, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accum(gg * a.data / np.maximum(n, 1e-300))
    return _record(a.tape, out, (a,), backfn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backfn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        a._accum(out * (g - inner))
    return _record(a.tape, out, (a,), backfn)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = mean_axes(a, axis=-1, keepdims=True)
    xc = a - mu
    var = mean_axes(xc * xc, axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes of (..., T, d)."""
    d = q.shape[-1]
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    w = softmax(scores * (1.0 / np.sqrt(d)), axis=-1)
    return matmul(w, v)


# -- finite-difference verification ----------------------------------------

class GradCheckResult:
    """Outcome of grad_check: worst relative error plus bookkeeping."""

    def __init__(self, max_rel_err, worst_input, worst_coord, skipped, nan_coords):
        self.max_rel_err = max_rel_err
        self.worst_input = worst_input
        self.worst_coord = worst_coord
        self.skipped = skipped          # coords too close to a kink to check
        self.nan_coords = nan_coords    # coords where either side was NaN

    @property
    def ok(self) -> bool:
        return not self.nan_coords and np.isfinite(self.max_rel_err)

    def __repr__(self):
        return (f"GradCheckResult(max_rel_err={self.max_rel_err:.3e}, "
                f"worst=({self.worst_input},{self.worst_coord}), "
                f"skipped={len(self.skipped)}, nans={len(self.nan_coords)})")


def grad_check(fn, inputs, step: float = 1e-4, coords=None) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor and must be pure and
    deterministic.  Runs entirely in 64-bit.  Returns the max over checked
    coordinates of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.

    Coordinates whose perturbed evaluations bring any kinked op within
    ``2 * step`` of its kink are flagged non-checkable and skipped rather
    than reported as failures; callers that need full coverage resample
    their inputs at an offset.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    tape = Tape(np.float64)
    leaves = [tape.leaf(x, requires_grad=True) for x in inputs]
    out = fn(leaves)
    tape.backward(out)
    analytic = [leaf.grad for leaf in leaves]

    def evaluate(xs):
        t = Tape(np.float64, track_kinks=True)
        y = fn([t.leaf(x) for x in xs])
        return float(y.data), t.kink_margin

    max_rel = 0.0
    worst = (-1, -1)
    skipped = []
    nan_coords = []
    for i, x in enumerate(inputs):
        flat = x.reshape(-1)
        idxs = range(flat.size) if coords is None else coords[i]
        for j in idxs:
            delta = np.zeros_like(flat)
            delta[j] = step
            d = delta.reshape(x.shape)
            hi, margin_hi = evaluate([xx if k != i else xx + d for k, xx in enumerate(inputs)])
            lo, margin_lo = evaluate([xx if k != i else xx - d for k, xx in enumerate(inputs)])
            if min(margin_hi, margin_lo) < 2.0 * step:
                skipped.append((i, j))
                continue
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            if not (np.isfinite(a) and np.isfinite(numeric)):
                nan_coords.append((i, j))
                continue
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
                worst = (i, j)
    return GradCheckResult(max_rel, worst[0], worst[1], skipped, nan_coords)

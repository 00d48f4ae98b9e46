"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything the backbone and the losses need, nothing more: dense tensors,
a replay tape, and a central finite-difference checker that serves as the
independent gradient oracle for the whole project.

Gradients accumulate into ``Tensor.grad`` buffers during ``backward``.
A tape may be walked backward exactly once; a second call raises
``GraphError`` rather than silently accumulating.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateEmbeddingError, DimensionError, GraphError

_ACTIVE_TAPES: list["Tape"] = []
_GRAD_ENABLED: bool = True


class Tensor:
    """Dense float64 tensor participating in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable operations.

    Usable as a context manager; while active, every recorded op lands
    here, which is how multi-forward training steps share one graph.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self.consumed = False

    def record(self, entry: _TapeEntry):
        self.entries.append(entry)

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self.entries)


class no_grad:
    """Context manager disabling tape recording (used by oracles)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _resolve_tape(inputs: Sequence[Tensor]) -> Tape:
    if _ACTIVE_TAPES:
        return _ACTIVE_TAPES[-1]
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise GraphError(
            "operands come from different tapes; wrap the computation in a "
            "single `with Tape():` block"
        )
    if tapes:
        return next(iter(tapes.values()))
    return Tape()


def _record(output: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape = _resolve_tape(inputs)
        output.tape = tape
        tape.record(_TapeEntry(output, list(inputs), backward_fn))
    return output


def backward(loss: Tensor):
    """Populate grads of every tensor the scalar ``loss`` depends on."""
    if loss.data.shape != ():
        raise GraphError(f"backward root must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise GraphError("loss is not attached to a tape (no recorded operations)")
    if tape.consumed:
        raise GraphError(
            "tape already walked backward once; build a fresh graph instead "
            "of accumulating"
        )
    tape.consumed = True
    loss.grad = np.asarray(1.0)
    for entry in reversed(tape.entries):
        if entry.output.grad is None:
            continue
        entry.backward_fn(entry.output.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------
# primitive operations
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.T)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _record(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean())

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / a.data.size))

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _record(out, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * sig * (1.0 + a.data * (1.0 - sig)))

    return _record(out, (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _record(out, (a,), bwd)


def texp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    out = Tensor(e)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * e)

    return _record(out, (a,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; -inf entries become exact 0."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {tuple(x.shape)}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad(y * (g - dot))

    return _record(out, (x,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """RMS normalization, row-wise for matrices: g * x / sqrt(mean(x^2)+eps)."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if eps <= 0:
        raise DimensionError("rms_norm eps must be positive")
    vec = x.ndim == 1
    xd = x.data[None, :] if vec else x.data
    if gain.data.shape != (xd.shape[1],):
        raise DimensionError(
            f"rms_norm gain shape {tuple(gain.data.shape)} does not match width {xd.shape[1]}"
        )
    n = xd.shape[1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=1, keepdims=True) + eps)
    y = gain.data * xd * inv
    out = Tensor(y[0] if vec else y)

    def bwd(g):
        gd = g[None, :] if vec else g
        gg = gd * gain.data
        if x.requires_grad:
            inner = (gg * xd).sum(axis=1, keepdims=True)
        # d/dx_i: g_i*inv - x_i * inv^3 / n * sum_j(go_j g_j x_j)
            gx = gg * inv - xd * (inv ** 3) * inner / n
            x.accumulate_grad(gx[0] if vec else gx)
        if gain.requires_grad:
            gain.accumulate_grad((gd * xd * inv).sum(axis=0))

    return _record(out, (x, gain), bwd)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of ``x`` by integer index (embedding lookup / extraction)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data[idx])

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate_grad(gx)

    return _record(out, (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data[:, start:stop])

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            x.accumulate_grad(gx)

    return _record(out, (x,), bwd)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))

    def bwd(g):
        off = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                t.accumulate_grad(g[:, off : off + w])
            off += w

    return _record(out, tuple(tensors), bwd)


def stack_scalars(scalars: Sequence[Tensor]) -> Tensor:
    """Stack 0-d tensors into a vector."""
    scalars = [_as_tensor(s) for s in scalars]
    out = Tensor(np.array([float(s.data) for s in scalars]))

    def bwd(g):
        for i, s in enumerate(scalars):
            if s.requires_grad:
                s.accumulate_grad(np.asarray(g[i]))

    return _record(out, tuple(scalars), bwd)


def logsumexp(v: Tensor) -> Tensor:
    """log(sum(exp(v))) over a vector, max-shifted for stability."""
    v = _as_tensor(v)
    m = v.data.max()
    e = np.exp(v.data - m)
    s = e.sum()
    out = Tensor(np.asarray(m + math.log(s)))

    def bwd(g):
        if v.requires_grad:
            v.accumulate_grad(float(g) * e / s)

    return _record(out, (v,), bwd)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors; raises on zero-norm operands."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.shape != v.data.shape or u.ndim != 1:
        raise DimensionError(
            f"cosine expects two equal-length vectors, got {tuple(u.shape)} and {tuple(v.shape)}"
        )
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateEmbeddingError("cosine of a zero-norm embedding is undefined")
    c = float(u.data @ v.data) / (nu * nv)
    c = min(1.0, max(-1.0, c))  # trim roundoff outside [-1, 1]
    out = Tensor(np.asarray(c))

    def bwd(g):
        g = float(g)
        if u.requires_grad:
            u.accumulate_grad(g * (v.data / (nu * nv) - c * u.data / (nu * nu)))
        if v.requires_grad:
            v.accumulate_grad(g * (u.data / (nu * nv) - c * v.data / (nv * nv)))

    return _record(out, (u, v), bwd)


def rope(x: Tensor, positions: Sequence[int], base: float) -> Tensor:
    """Rotary position transform over row vectors of even width.

    Pair (x[2i], x[2i+1]) of row p rotates by angle p * base^(-2i/width).
    """
    x = _as_tensor(x)
    length, width = x.shape
    if width % 2 != 0:
        raise DimensionError(f"rope requires even width, got {width}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (length,):
        raise DimensionError("rope positions must match row count")
    freqs = base ** (-np.arange(0, width, 2, dtype=np.float64) / width)
    angles = pos[:, None] * freqs[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x.data[:, 0::2], x.data[:, 1::2]
    y = np.empty_like(x.data)
    y[:, 0::2] = even * cos - odd * sin
    y[:, 1::2] = even * sin + odd * cos
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            ge, go = g[:, 0::2], g[:, 1::2]
            gx = np.empty_like(g)
            # inverse rotation (transpose of an orthogonal map)
            gx[:, 0::2] = ge * cos + go * sin
            gx[:, 1::2] = -ge * sin + go * cos
            x.accumulate_grad(gx)

    return _record(out, (x,), bwd)


# ----------------------------------------------------------------------
# finite-difference oracle
# ----------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """Compare taped gradients of ``f`` at ``x`` against central differences.

    Returns the worst relative error with denominator
    max(|analytic|, |numeric|, 1e-8). ``coords`` restricts the check to a
    subset of flat coordinates (all of them by default).
    """
    if not (1e-7 <= h <= 1e-4):
        raise ValueError(f"step size {h} outside the supported range [1e-7, 1e-4]")
    x.zero_grad()
    with Tape():
        y = f(x)
        backward(y)
    if x.grad is None:
        raise GraphError("function output does not depend on x (no gradient recorded)")
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else list(coords)
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst

"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops run eagerly on numpy arrays.  When a :class:`Tape` is active and one of
an op's inputs is tracked by it, the op is recorded together with a closure
that maps the output gradient to input gradients.  Outside a tape nothing is
recorded, so inference pays only the numpy cost.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-6


class NumericError(ArithmeticError):
    """A forward op met or produced a non-finite value."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    needs: tuple
    backward: Callable


class Tape:
    """Single-use record of differentiable ops for one thread.

    Usage::

        with Tape() as tape:
            tape.watch(*params)
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._used = False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched.append(t)
            self._tracked.add(id(t))

    def __enter__(self):
        if self._used:
            raise TapeError("tape already consumed")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, inputs, backward):
        needs = tuple(id(x) in self._tracked for x in inputs)
        if any(needs):
            self._tracked.add(id(out))
            self._records.append(_Record(out, inputs, needs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. ``sources``; consumes the tape."""
        if self._used:
            raise TapeError("tape already consumed")
        if target.data.size != 1:
            raise ValueError("gradient target must be a scalar")
        self._used = True
        grads = {id(target): np.ones_like(target.data)}
        for rec in reversed(self._records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            in_grads = rec.backward(g, rec.needs)
            for x, need, gx in zip(rec.inputs, rec.needs, in_grads):
                if not need or gx is None:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape))
        self._records.clear()
        return out


def record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    """Register ``out`` on the active tape (if any).

    ``backward(g, needs)`` returns one gradient (or None) per input.
    """
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g, n: (
        _unbroadcast(g, a.shape) if n[0] else None,
        _unbroadcast(g, b.shape) if n[1] else None,
    ))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g, n: (
        _unbroadcast(g, a.shape) if n[0] else None,
        _unbroadcast(-g, b.shape) if n[1] else None,
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g, n: (
        _unbroadcast(g * b.data, a.shape) if n[0] else None,
        _unbroadcast(g * a.data, b.shape) if n[1] else None,
    ))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g, n):
        ga = gb = None
        if n[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if n[1]:
            if b.ndim == 2 and a.ndim > 2:
                # weight gradient: fold the batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record(out, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, 0.0))
    return record(out, (x,), lambda g, n: (g * pos,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g, n: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes))
    return record(out, (x,), lambda g, n: (np.transpose(g, inv),))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def backward(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / count)


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g, n):
        parts = []
        for i, need in enumerate(n):
            if not need:
                parts.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return record(out, tuple(xs), backward)


def pad_time(x, left: int, right: int) -> Tensor:
    """Zero-pad axis 1 of a (B, T, C) tensor."""
    x = as_tensor(x)
    out = Tensor(np.pad(x.data, ((0, 0), (left, right), (0, 0))))
    T = x.shape[1]
    return record(out, (x,), lambda g, n: (g[:, left:left + T],))


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g, n):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return record(out, (table,), backward)


def conv1d(x, weight, bias, stride: int = 1) -> Tensor:
    """Valid 1-D convolution over axis 1 of a (B, T, Cin) tensor.

    ``weight`` is (K, Cin, Cout); output frame j reads input frames
    ``j*stride .. j*stride + K - 1``.  Pad beforehand for other alignments.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    B, T, _ = x.shape
    K, _, cout = weight.shape
    J = max(0, (T - K) // stride + 1)
    out_data = np.zeros((B, J, cout)) + bias.data
    taps = []
    for k in range(K):
        xk = x.data[:, k:k + stride * (J - 1) + 1:stride] if J else x.data[:, :0]
        taps.append(xk)
        out_data = out_data + xk @ weight.data[k]
    out = Tensor(out_data)

    def backward(g, n):
        gx = gw = gb = None
        if n[0]:
            gx = np.zeros_like(x.data)
            for k in range(K):
                gx[:, k:k + stride * (J - 1) + 1:stride] += g @ weight.data[k].T
        if n[1]:
            g2 = g.reshape(-1, cout)
            gw = np.stack([taps[k].reshape(-1, taps[k].shape[-1]).T @ g2 for k in range(K)])
        if n[2]:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# normalisation / probability ops
# ---------------------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    return record(out, (x,), lambda g, n: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def masked_softmax(x, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask`` (True = keep); masked entries are 0.

    Every slice along ``axis`` must keep at least one entry.
    """
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    return record(out, (x,), lambda g, n: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(y)

    def backward(g, n):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError(f"layer_norm: last axis {x.shape[-1]} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g, n):
        gx = gg = gbias = None
        if n[0]:
            d = g * gain.data
            gx = inv * (d - d.mean(axis=-1, keepdims=True) - xhat * (d * xhat).mean(axis=-1, keepdims=True))
        if n[1]:
            gg = _unbroadcast(g * xhat, gain.shape)
        if n[2]:
            gbias = _unbroadcast(g, bias.shape)
        return gx, gg, gbias

    return record(out, (x, gain, bias), backward)


def log_sum_exp(xs) -> float:
    """Stable log(sum(exp(xs))) over a non-empty sequence of reals."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = xs.max()
    if m == -np.inf:
        return -math.inf
    return float(m + math.log(np.exp(xs - m).sum()))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_param: dict = field(default_factory=dict)
    finite: bool = True

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_err < self.tol


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], tol: float = 1e-4,
               step: float = 1e-5, max_coords: int | None = None, seed: int = 0,
               floor: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``f`` closes over ``params`` and must read their ``.data`` on every call.
    With ``max_coords`` only that many randomly chosen entries per tensor are
    probed.  The per-tensor error is ||analytic - numeric|| / max(||analytic||,
    ||numeric||, floor).
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        tape.watch(*params)
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport(math.inf, tol, finite=False)
    grads = tape.gradient(loss, params)
    report = GradCheckReport(0.0, tol)
    for i, (p, g) in enumerate(zip(params, grads)):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            fp = float(f().data)
            flat[c] = orig - step
            fm = float(f().data)
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.finite = False
                report.max_rel_err = math.inf
                return report
            numeric[j] = (fp - fm) / (2 * step)
        analytic = g.reshape(-1)[coords]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        err = float(np.linalg.norm(analytic - numeric) / denom)
        report.per_param[p.name or f"param{i}"] = err
        report.max_rel_err = max(report.max_rel_err, err)
    return report

"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Design
------
A ``Tensor`` is a contiguous row-major float64 array plus an optional gradient
accumulator. Operations execute eagerly in numpy and, when a ``Tape`` is
active on the current thread, append a pullback closure to it. Replaying the
tape in reverse accumulates dL/dx into every tensor reachable from the loss,
leaves included.

Every operation validates its output: NaN or Inf raises ``NonFiniteError``
immediately instead of propagating. Tensors are treated as immutable after
creation (gradient accumulation aside); ops never write into their inputs.

Tapes are thread-local, so independent tapes on separate threads are safe.
There is no support for differentiating through a backward pass (single
reverse sweep only).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "exp_op",
    "log_op",
    "sqrt_op",
    "tanh_op",
    "sigmoid",
    "silu",
    "squared_relu",
    "layer_norm",
    "diag_part",
    "embedding",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """Contiguous row-major float64 array with an optional grad accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


_tls = threading.local()


def _stack() -> list:
    st = getattr(_tls, "stack", None)
    if st is None:
        st = []
        _tls.stack = st
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of operations; reverse replay accumulates gradients.

    Each record pairs the op output with a pullback that routes the output's
    gradient into the inputs. One ``backward`` call touches every stored
    record at most once, so each requires_grad leaf is accumulated exactly
    once per use of that leaf.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, pullback: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, pullback))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate dL/dx into .grad for everything feeding ``root``."""
        if seed is None:
            seed = np.ones_like(root.data)
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += seed
        for out, pullback in reversed(self._records):
            if out.grad is not None:
                g = out.grad
                _check_finite(g, "backward")
                pullback(g)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _emit(out_data: np.ndarray, op: str, inputs: Sequence[Tensor],
          pullback: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, pullback)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def pull(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _emit(a.data + b.data, "add", (a, b), pull)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def pull(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _emit(a.data - b.data, "sub", (a, b), pull)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def pull(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _emit(a.data * b.data, "mul", (a, b), pull)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def pull(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _emit(a.data / b.data, "div", (a, b), pull)


def neg(a) -> Tensor:
    a = _wrap(a)

    def pull(g):
        if a.requires_grad:
            _accum(a, -g)

    return _emit(-a.data, "neg", (a,), pull)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Product of a (..., k) tensor with a (k, n) matrix.

    Leading axes of ``a`` are treated as batch dimensions. Backward follows
    dA = dC @ B^T and dB = A^T @ dC on the flattened views.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim != 2:
        raise ShapeError(f"matmul expects (..., k) @ (k, n), got {a.shape} @ {b.shape}")
    k = a.shape[-1]
    if b.shape[0] != k:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    a2 = a.data.reshape(-1, k)
    out2 = a2 @ b.data
    out_shape = a.shape[:-1] + (b.shape[1],)

    def pull(g):
        g2 = g.reshape(-1, b.shape[1])
        if a.requires_grad:
            _accum(a, (g2 @ b.data.T).reshape(a.shape))
        if b.requires_grad:
            _accum(b, a2.T @ g2)

    return _emit(out2.reshape(out_shape), "matmul", (a, b), pull)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def pull(g):
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _emit(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), pull)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def pull(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _emit(np.ascontiguousarray(a.data.reshape(shape)), "reshape", (a,), pull)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _emit(np.asarray(out_data), "sum", (a,), pull)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def diag_part(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag_part expects a square matrix, got {a.shape}")
    n = a.shape[0]

    def pull(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.fill_diagonal(full, g)
            _accum(a, full)

    return _emit(np.ascontiguousarray(np.diagonal(a.data)), "diag_part", (a,), pull)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Row lookup into a (vocab, C) table; gradient scatter-adds by id."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )

    def pull(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids, g)
            _accum(table, dt)

    return _emit(np.ascontiguousarray(table.data[ids]), "embedding", (table,), pull)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp_op(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def pull(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _emit(out_data, "exp", (a,), pull)


def log_op(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def pull(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _emit(out_data, "log", (a,), pull)


def sqrt_op(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def pull(g):
        if a.requires_grad:
            _accum(a, g * 0.5 / out_data)

    return _emit(out_data, "sqrt", (a,), pull)


def tanh_op(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def pull(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data))

    return _emit(out_data, "tanh", (a,), pull)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def pull(g):
        if a.requires_grad:
            _accum(a, g * out_data * (1.0 - out_data))

    return _emit(out_data, "sigmoid", (a,), pull)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def pull(g):
        if a.requires_grad:
            _accum(a, g * (sig + a.data * sig * (1.0 - sig)))

    return _emit(out_data, "silu", (a,), pull)


def squared_relu(a) -> Tensor:
    """max(x, 0)^2."""
    a = _wrap(a)
    relu = np.maximum(a.data, 0.0)
    out_data = relu * relu

    def pull(g):
        if a.requires_grad:
            _accum(a, g * 2.0 * relu)

    return _emit(out_data, "squared_relu", (a,), pull)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine.

    ``gain`` and ``bias`` broadcast against the normalized tensor, so both a
    flat per-channel affine and a per-head (H, d) affine work. eps = 0 is
    permitted; a zero-variance row then trips the non-finite check.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def pull(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _emit(out_data, "layer_norm", (x, gain, bias), pull)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    passed: bool
    max_abs_err: float
    max_rel_err: float
    per_input: list[dict] = field(default_factory=list)

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {flag}: max_abs_err={self.max_abs_err:.3e} "
                f"max_rel_err={self.max_rel_err:.3e}")


def grad_check(f: Callable[[Sequence[Tensor]], Tensor],
               inputs: Sequence[Tensor],
               rel_tol: float = 1e-5,
               abs_tol: float = 1e-8,
               h: float = 1e-5) -> GradCheckReport:
    """Check the tape gradient of a scalar-valued ``f`` per coordinate.

    Central differences (f(x+h) - f(x-h)) / 2h are evaluated outside any
    tape; the analytic gradient comes from one reverse sweep. A coordinate
    passes when |analytic - numeric| <= abs_tol + rel_tol * max(|a|, |n|).
    """
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must have requires_grad=True")
        t.zero_grad()

    with Tape() as tape:
        out = f(inputs)
        if out.size != 1:
            raise ShapeError("grad_check target must be scalar-valued")
        tape.backward(out)

    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    max_abs = 0.0
    max_rel = 0.0
    passed = True
    per_input = []
    for t, ana in zip(inputs, analytic):
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(inputs).item()
            flat[i] = orig - h
            fm = f(inputs).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        abs_err = np.abs(ana - num)
        denom = np.maximum(np.abs(ana), np.abs(num))
        ok = abs_err <= abs_tol + rel_tol * denom
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(denom > 0, abs_err / np.maximum(denom, 1e-300), 0.0)
        entry_abs = float(abs_err.max()) if abs_err.size else 0.0
        entry_rel = float(rel.max()) if rel.size else 0.0
        per_input.append({
            "shape": t.shape,
            "max_abs_err": entry_abs,
            "max_rel_err": entry_rel,
            "passed": bool(ok.all()),
        })
        max_abs = max(max_abs, entry_abs)
        max_rel = max(max_rel, entry_rel)
        passed = passed and bool(ok.all())

    return GradCheckReport(passed=passed, max_abs_err=max_abs,
                           max_rel_err=max_rel, per_input=per_input)

"""Dense 2-D tensors with tape-based reverse-mode differentiation, plus Adam.

Only what the denoiser and the vector-field baseline need: every value is a
2-D numpy array, every op knows its own vector-Jacobian product, and a
:class:`Tape` records ops define-by-run while it is the active tape.

    with Tape() as tape:
        loss = sum_all(square(matmul(x, w) - y))
    backward(tape, loss)
    w.grad  # dLoss/dw
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_active: list["Tape"] = []
_debug = False


def set_debug(enabled: bool) -> None:
    """Raise ``FloatingPointError`` on any non-finite op result."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    """A 2-D array with an optional gradient buffer.

    Leaves are created by the user; pass ``grad`` to have gradients accumulate
    into an existing buffer (e.g. a view of a flat gradient vector).
    """

    __slots__ = ("value", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, value, requires_grad=False, grad=None, name=None, _leaf=True):
        value = np.asarray(value)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {value.shape}")
        if grad is not None and grad.shape != value.shape:
            raise ValueError("grad buffer shape does not match value")
        self.value = value
        self.grad = grad
        self.requires_grad = bool(requires_grad)
        self.is_leaf = _leaf
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable


class Tape:
    """Ordered record of differentiable ops; consumed by one :func:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _as_tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype if like is not None else None)
    return Tensor(arr)


def _emit(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced by autodiff op")
    tape = _active[-1] if _active else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, _leaf=False)
    if needs:
        if tape.consumed:
            raise RuntimeError("tape already consumed by backward")
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T`` with ``transpose_b``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    inner_b = b.cols if transpose_b else b.rows
    if a.cols != inner_b:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape} (transpose_b={transpose_b})")
    av, bv = a.value, b.value
    out = av @ (bv.T if transpose_b else bv)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ bv if transpose_b else g @ bv.T
        if b.requires_grad:
            gb = g.T @ av if transpose_b else av.T @ g
        return ga, gb

    return _emit(out, (a, b), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum with row/column broadcasting of 1-sized dims."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.value)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.value)
    out = a.value + b.value
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.value)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.value)
    out = a.value - b.value
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting; scalars and arrays are constants."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.value)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.value)
    av, bv = a.value, b.value
    out = av * bv

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.value * a.value.dtype.type(s)
    return _emit(out, (a,), lambda g: (g * g.dtype.type(s),))


def lerp(a: Tensor, b: Tensor, wa: float, wb: float) -> Tensor:
    """``wa * a + wb * b`` for same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"lerp shape mismatch: {a.shape} vs {b.shape}")
    t = a.value.dtype.type
    out = a.value * t(wa)
    out += b.value * t(wb)
    return _emit(out, (a, b), lambda g: (g * t(wa), g * t(wb)))


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = a.value + a.value.dtype.type(s)
    return _emit(out, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _emit(av * av, (a,), lambda g: (2 * g * av,))


def sum_rows(a: Tensor) -> Tensor:
    """Per-row sum: (N, C) -> (N, 1)."""
    av = a.value
    return _emit(av.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def sum_all(a: Tensor) -> Tensor:
    av = a.value
    out = np.asarray(av.sum(), dtype=av.dtype).reshape(1, 1)
    return _emit(out, (a,), lambda g: (np.full(av.shape, g[0, 0], dtype=av.dtype),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.value.size)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    out = np.concatenate([p.value for p in parts], axis=1)
    splits = np.cumsum([p.cols for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _emit(out, tuple(parts), vjp)


def silu(a: Tensor, gain: float = 1.0) -> Tensor:
    """``gain * x * sigmoid(x)``."""
    av = a.value
    with np.errstate(over="ignore"):  # exp overflow -> sigmoid 0, which is the right limit
        sig = np.exp(-av)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    out = av * sig
    if gain != 1.0:
        out *= av.dtype.type(gain)

    def vjp(g):
        d = 1.0 - sig
        d *= av
        d += 1.0
        d *= sig
        d *= g
        if gain != 1.0:
            d *= d.dtype.type(gain)
        return (d,)

    return _emit(out, (a,), vjp)


def sin(a: Tensor) -> Tensor:
    av = a.value
    return _emit(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a: Tensor) -> Tensor:
    av = a.value
    return _emit(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def normalize_rows(a: Tensor, eps: float = 1e-4, rms: bool = True) -> Tensor:
    """``x / (eps + |x|_row * s)`` with ``s = 1/sqrt(cols)`` (RMS) or 1 (L2)."""
    av = a.value
    s = 1.0 / np.sqrt(av.shape[1]) if rms else 1.0
    norm = np.sqrt(np.einsum("ij,ij->i", av, av))[:, None]
    den = (eps + s * norm).astype(av.dtype)
    out = av / den

    def vjp(g):
        gx = np.einsum("ij,ij->i", g, av)[:, None]
        safe = np.where(norm > 0, norm, 1.0)
        coef = (s * gx / (den * den * safe)).astype(av.dtype)
        out = g / den
        out -= av * coef
        return (out,)

    return _emit(out, (a,), vjp)


# --------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every leaf reachable through ``tape``.

    Leaf gradients are accumulated (``+=``) into ``leaf.grad``, which is
    allocated on first use if the leaf has no buffer.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"loss must be 1x1, got {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward")
    tape.consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=loss.value.dtype)}
    owned: set[int] = set()
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        owned.discard(id(rec.out))
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.value)
                t.grad += gi
            else:
                key = id(t)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = gi
                elif key in owned:
                    prev += gi
                else:
                    # vjps may hand the same array to several inputs; copy before mutating
                    grads[key] = prev + gi
                    owned.add(key)
    tape.records.clear()


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params, dtype=np.float64)
        if self.v is None:
            self.v = np.zeros(self.n_params, dtype=np.float64)
        if len(self.m) != self.n_params or len(self.v) != self.n_params:
            raise ValueError("moment arrays must match parameter count")


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float | None = None) -> np.ndarray:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != (state.n_params,) or grads.shape != (state.n_params,):
        raise ValueError(
            f"length mismatch: state {state.n_params}, params {params.shape}, grads {grads.shape}"
        )
    lr = state.lr if lr is None else lr
    state.step += 1
    g = grads.astype(np.float64)
    state.m *= state.beta1
    state.m += (1 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)
    return params


def tune_allocator() -> None:
    """Keep freed activation buffers in the glibc heap between iterations.

    Each training step allocates and frees the same few hundred MB-sized
    arrays; the default mmap/trim thresholds hand them back to the kernel
    every time, which costs about a third of a step.
    """
    import ctypes
    import ctypes.util
    import sys

    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 64 << 20)  # M_TOP_PAD
        libc.mallopt(-3, 32 << 20)  # M_MMAP_THRESHOLD (glibc maximum)
    except (OSError, AttributeError):
        pass

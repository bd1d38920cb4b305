"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a record to the active
:class:`ComputationTape` when at least one input requires a gradient.
:func:`backward` replays the tape in reverse and then clears it.

The masking sentinel is ``-inf``: only :func:`masked_fill` may produce it,
and :func:`softmax_lastdim` maps it to an exact zero weight.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or +/-inf where finite values are required."""


class DegenerateSliceError(ValueError):
    """A softmax slice had every entry masked."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


@dataclass(eq=False)
class _Record:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class ComputationTape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, so every record's inputs are
    produced by earlier records or are leaves.
    """

    records: list[_Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = ComputationTape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> ComputationTape:
    return _state.tape


@contextlib.contextmanager
def tape_scope(tape: ComputationTape | None = None):
    """Route recordings in this thread to ``tape`` (a fresh one by default)."""
    tape = ComputationTape() if tape is None else tape
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor's reflected operator

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else (axes or None))
    def swapaxes(self, a, b): return swapaxes(self, a, b)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sigmoid(self): return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str, allow_neginf: bool = False) -> np.ndarray:
    if allow_neginf:
        bad = np.isnan(arr).any() or np.isposinf(arr).any()
    else:
        bad = not np.isfinite(arr).all()
    if bad:
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward, allow_neginf=False,
          checked: bool = False) -> Tensor:
    # ``checked``: the op only moves or drops values, so the output is finite
    # whenever its inputs are; every arithmetic op still scans
    if not checked:
        _check(data, op, allow_neginf)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = None
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _state.tape.records.append(_Record(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a} with {b}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape))
    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad ** p
    return _make(out, "power", (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, "log", (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def elu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    ex = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, ex - 1.0)
    return _make(out, "elu", (a,), lambda g: (g * np.where(pos, 1.0, ex),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay exact)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)
    return _make(out, "gelu", (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``value`` may be ``-inf``."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if np.isnan(value) or value == np.inf:
        raise NonFiniteError(f"masked_fill value {value}")
    out = np.where(mask, value, a.data)
    return _make(out, "masked_fill", (a,), lambda g: (np.where(mask, 0.0, g),), checked=True)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (evaluation mode)."""
    a = as_tensor(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(out), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(old),), checked=True)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, "transpose", (a,), lambda g: (g.transpose(inv),), checked=True)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) or
               (isinstance(i, np.integer)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[idx], dtype=DTYPE)
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(out, "getitem", (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in ts]}") from exc
    n = len(ts)
    return _make(out, "stack", ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def window_view(arr: np.ndarray, width: int, step: int, length: int) -> np.ndarray:
    """Read-only strided view ``out[..., t, k, :] = arr[..., t + k * step, :]``."""
    if arr.ndim < 2 or width < 1 or step < 1 or length < 0:
        raise ContractError("window_view needs rank >= 2, width >= 1, step >= 1")
    span = (width - 1) * step
    if arr.shape[-2] < length + span:
        raise ShapeError(f"window_view: {arr.shape[-2]} rows < {length} + {span}")
    s_row = arr.strides[-2]
    return np.lib.stride_tricks.as_strided(
        arr, arr.shape[:-2] + (length, width, arr.shape[-1]),
        arr.strides[:-2] + (s_row, s_row * step, arr.strides[-1]), writeable=False)


def dilated_windows(a, width: int, step: int, length: int) -> Tensor:
    """``out[..., t, k, :] = a[..., t + k * step, :]`` for ``t < length``, ``k < width``.

    The result is a read-only view of ``a``, so it costs no copy and no
    finiteness scan. The rows axis is -2.
    """
    a = as_tensor(a)
    out = window_view(a.data, width, step, length)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        for k in range(width):
            full[..., k * step:k * step + length, :] += g[..., k, :]
        return (full,)
    return _make(out, "dilated_windows", (a,), bw, checked=True)


def custom_op(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    """Record a fused op: ``backward(g)`` returns one gradient per input."""
    return _make(np.asarray(data, dtype=DTYPE), op, tuple(inputs), backward)


def pad_axis(a, axis: int, left: int, right: int, value: float = 0.0) -> Tensor:
    """Pad ``left``/``right`` cells filled with ``value`` along ``axis``."""
    a = as_tensor(a)
    if left < 0 or right < 0:
        raise ContractError("pad counts must be non-negative")
    axis = axis % a.ndim
    size = a.shape[axis]
    shape = list(a.shape)
    shape[axis] = left + size + right
    out = np.full(shape, value, dtype=DTYPE)  # np.pad has a large fixed cost
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(left, left + size)
    sl = tuple(sl)
    out[sl] = a.data
    return _make(out, "pad_axis", (a,), lambda g: (g[sl],), checked=bool(np.isfinite(value)))


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _make(ad @ bd, "matmul", (a, b), bw)


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries receive exactly zero weight."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    xd = x.data
    mx = xd.max(axis=-1, keepdims=True)
    if np.isneginf(mx).any():
        raise DegenerateSliceError("softmax over a fully masked slice")
    e = np.exp(xd - mx)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _make(out, "softmax", (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _make(out, "layer_norm", (x, gain, bias), bw)


def conv2d_same(x, w, b) -> Tensor:
    """2-D cross-correlation with zero 'same' padding, channels-last.

    ``x``: (N, H, W, Cin); ``w``: (kh, kw, Cin, Cout) with odd kernel sizes;
    ``b``: (Cout,). Output: (N, H, W, Cout).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sizes must be odd")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape}")
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # im2col: (N*H*W, kh*kw*Cin), column order matches w.reshape(-1, Cout)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(cols.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * wd, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(n, h, wd, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        if not x.requires_grad:
            return None, gw, g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(n, h, wd, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, i, j, :]
        return gxp[:, ph:ph + h, pw:pw + wd, :], gw, g2.sum(axis=0)
    return _make(out, "conv2d", (x, w, b), bw)


def max_pool(x, k: int, axis: int = -1) -> Tensor:
    """Non-overlapping max pooling of width ``k`` along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    size = x.shape[axis]
    if size % k:
        raise ShapeError(f"max_pool: axis size {size} not divisible by {k}")
    shape = x.shape
    blocks = x.data.reshape(shape[:axis] + (size // k, k) + shape[axis + 1:])
    arg = blocks.argmax(axis=axis + 1)
    sel = np.expand_dims(arg, axis + 1)
    out = np.take_along_axis(blocks, sel, axis=axis + 1).squeeze(axis + 1)

    def bw(g):
        full = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(full, sel, np.expand_dims(g, axis + 1), axis=axis + 1)
        return (full.reshape(shape),)
    return _make(out, "max_pool", (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: ComputationTape | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The tape is cleared
    afterwards, whether or not the pass succeeds.
    """
    tape = _state.tape if tape is None else tape
    try:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss is not connected to any requires-grad tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
        produced = set()
        leaves: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(tape.records):
            produced.add(id(rec.out))
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                leaves.setdefault(key, t)
        for key, g in grads.items():
            if key in produced:
                continue
            t = leaves[key]
            g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
    finally:
        tape.clear()


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))

"""Differentiable operations over :class:`~codlab.tensor.core.Tensor`.

Every op computes eagerly with numpy and, when a tape is open and an
input requires gradients, records a backward closure. Elementwise ops
demand identical shapes — there is no implicit broadcasting; scalar
Python floats are the only exception.
"""

from __future__ import annotations

import functools
import threading
import zlib
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .core import Tensor, check_finite, record_op

__all__ = [
    "conv2d",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "div",
    "add_const",
    "mul_const",
    "abs_",
    "concat_channels",
    "split_channels",
    "resize_bilinear",
    "resize_nearest",
    "avgpool2d",
    "sum_all",
    "mean_all",
    "bce_with_logits",
    "macs_counter",
    "relu_margin_probe",
    "relu_sign_recorder",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# MACs accounting
# ---------------------------------------------------------------------------


class MacsCounter:
    """Tallies multiply-accumulates of conv layers during a forward pass.

    Convention of the usual flops counters: a conv costs
    Cout*(Cin/groups)*k^2*H'*W' MACs plus H'*W'*Cout when biased;
    BN, activations, resizes and pools are not charged. In
    ``shape_only`` mode conv outputs are zero-filled without running the
    matmul, so counting a big model stays cheap.
    """

    def __init__(self, shape_only: bool = True):
        self.shape_only = shape_only
        self.total = 0
        self.by_scope: dict[str, int] = {}
        self._scope = ""

    def set_scope(self, name: str) -> None:
        self._scope = name

    def add(self, macs: int) -> None:
        self.total += macs
        self.by_scope[self._scope] = self.by_scope.get(self._scope, 0) + macs


_tls = threading.local()


class macs_counter:
    """Context manager activating a :class:`MacsCounter`."""

    def __init__(self, shape_only: bool = True):
        self.counter = MacsCounter(shape_only=shape_only)

    def __enter__(self) -> MacsCounter:
        if getattr(_tls, "macs", None) is not None:
            raise RuntimeError("a MACs counter is already active")
        _tls.macs = self.counter
        return self.counter

    def __exit__(self, *exc):
        _tls.macs = None
        return False


def _active_macs() -> Optional[MacsCounter]:
    return getattr(_tls, "macs", None)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation, NCHW, square odd kernel.

    H' = floor((H + 2*pad - k) / stride) + 1, likewise W'.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    n, cin, h, wi = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects Cin/groups={cin_g}, input has {cin // groups}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} != ({cout},)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wi + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"empty output {ho}x{wo} for input {h}x{wi}, k={k}, stride={stride}, pad={pad}")

    counter = _active_macs()
    if counter is not None:
        macs = cout * cin_g * k * k * ho * wo
        if b is not None:
            macs += cout * ho * wo
        counter.add(macs * n)
        if counter.shape_only:
            return Tensor(np.zeros((n, cout, ho, wo), dtype=x.dtype))

    l = ho * wo
    if k == 1 and stride == 1 and pad == 0:
        cols = x.data.reshape(n, cin, l)
    else:
        cols = kernels.im2col(x.data, k, stride, pad, ho, wo)
    colsg = cols.reshape(n, groups, cin_g * k * k, l)
    wg = w.data.reshape(groups, cout // groups, cin_g * k * k)
    outg = np.matmul(wg, colsg)  # (N, groups, Cout/groups, L)
    out_arr = outg.reshape(n, cout, ho, wo)
    if b is not None:
        out_arr = out_arr + b.data.reshape(1, cout, 1, 1)
    check_finite(out_arr, "conv2d")
    out = Tensor(out_arr)

    def backward():
        g = out.grad.reshape(n, groups, cout // groups, l)
        if w.requires_grad:
            dw = np.einsum("ngol,ngkl->gok", g, colsg, optimize=True)
            w.accumulate_grad(dw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(out.grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wg.transpose(0, 2, 1), g).reshape(n, cin * k * k, l)
            if k == 1 and stride == 1 and pad == 0:
                dx = dcols.reshape(x.shape)
            else:
                dx = kernels.col2im(dcols, x.shape, k, stride, pad, ho, wo)
            x.accumulate_grad(dx)

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance, torch-style). Eval mode
    normalizes with the running buffers. eps must be positive so a
    zero-variance channel stays finite.
    """
    x = _as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    cnt = n * h * w
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        uvar = var * (cnt / (cnt - 1)) if cnt > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * uvar.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out_arr = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    check_finite(out_arr, "batchnorm2d")
    out = Tensor(out_arr)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = (gamma.data * inv).reshape(1, c, 1, 1)
            if training:
                gm = g.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gxm = (g * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = gi * (g - gm - xhat * gxm)
            else:
                dx = gi * g
            x.accumulate_grad(dx)

    return record_op("batchnorm2d", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pointwise / elementwise
# ---------------------------------------------------------------------------


class relu_margin_probe:
    """Tracks the smallest |pre-activation| seen by relu while active.

    Finite-difference checks are only valid when no activation sits
    within the step h of the kink; tests use this to pick safe seeds.
    """

    def __init__(self):
        self.margin = np.inf

    def __enter__(self):
        _tls.relu_probe = self
        return self

    def __exit__(self, *exc):
        _tls.relu_probe = None
        return False


class relu_sign_recorder:
    """CRC of every relu sign pattern seen while active.

    Two forward passes with equal CRCs activated the same relu branches,
    i.e. the function was piecewise-linear-equivalent between them; the
    gradient checker uses this to reject perturbations that cross a kink.
    """

    def __init__(self):
        self.crc = 0

    def __enter__(self):
        _tls.sign_recorder = self
        return self

    def __exit__(self, *exc):
        _tls.sign_recorder = None
        return False

    def update(self, pattern: np.ndarray) -> None:
        self.crc = zlib.crc32(np.packbits(pattern).tobytes(), self.crc)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    probe = getattr(_tls, "relu_probe", None)
    if probe is not None and x.size:
        probe.margin = min(probe.margin, float(np.abs(x.data).min()))
    rec = getattr(_tls, "sign_recorder", None)
    if rec is not None:
        rec.update(x.data > 0)
    out = Tensor(np.maximum(x.data, 0))

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > 0))

    return record_op("relu", out, (x,), backward)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    pos = a >= 0
    s = np.empty_like(a)
    s[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    s[~pos] = ea / (1.0 + ea)
    return s


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = Tensor(s)

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * s * (1.0 - s))

    return record_op("sigmoid", out, (x,), backward)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)

    return record_op("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(-out.grad)

    return record_op("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.requires_grad:
            b.accumulate_grad(out.grad * a.data)

    return record_op("mul", out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "div")
    out_arr = a.data / b.data
    check_finite(out_arr, "div")
    out = Tensor(out_arr)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad / b.data)
        if b.requires_grad:
            b.accumulate_grad(-out.grad * a.data / (b.data * b.data))

    return record_op("div", out, (a, b), backward)


def add_const(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data + x.dtype.type(c))

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad)

    return record_op("add_const", out, (x,), backward)


def mul_const(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data * x.dtype.type(c))

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * x.dtype.type(c))

    return record_op("mul_const", out, (x,), backward)


def abs_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.abs(x.data))

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * np.sign(x.data))

    return record_op("abs", out, (x,), backward)


# ---------------------------------------------------------------------------
# channel concat / split
# ---------------------------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    ref = ts[0]
    for t in ts[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ValueError(f"concat: incompatible shapes {t.shape} vs {ref.shape}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=1))
    edges = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward():
        for t, lo, hi in zip(ts, edges[:-1], edges[1:]):
            if t.requires_grad:
                t.accumulate_grad(out.grad[:, lo:hi])

    return record_op("concat", out, ts, backward)


def split_channels(x: Tensor, m: int) -> list[Tensor]:
    """Split into m contiguous channel blocks; concat(split(x)) == x."""
    x = _as_tensor(x)
    c = x.shape[1]
    if m < 1 or c % m:
        raise ValueError(f"cannot split {c} channels into {m} equal groups")
    step = c // m
    outs = tuple(Tensor(np.ascontiguousarray(x.data[:, i * step:(i + 1) * step])) for i in range(m))

    def backward():
        g = np.zeros_like(x.data)
        any_grad = False
        for i, o in enumerate(outs):
            if o.grad is not None:
                g[:, i * step:(i + 1) * step] = o.grad
                any_grad = True
        if any_grad and x.requires_grad:
            x.accumulate_grad(g)

    record_op("split", outs, (x,), backward)
    return list(outs)


# ---------------------------------------------------------------------------
# bilinear / nearest resize
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def _lin_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) 1-D interpolation matrix.

    Half-pixel-center convention: source coordinate of output i is
    (i + 0.5) * n_in / n_out - 0.5, clamped at the borders.
    """
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(s)
    t = s - i0
    lo = np.clip(i0, 0, n_in - 1).astype(np.int64)
    hi = np.clip(i0 + 1, 0, n_in - 1).astype(np.int64)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m


def bilinear_resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of a numpy array (no autodiff)."""
    h, w = a.shape[-2], a.shape[-1]
    if (h, w) == (out_h, out_w):
        return a
    ry = _lin_weights(h, out_h).astype(a.dtype)
    rx = _lin_weights(w, out_w).astype(a.dtype)
    return np.matmul(np.matmul(ry, a), rx.T)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the spatial axes; identity when sizes match."""
    x = _as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    ry = _lin_weights(h, out_h).astype(x.dtype)
    rx = _lin_weights(w, out_w).astype(x.dtype)
    out = Tensor(np.matmul(np.matmul(ry, x.data), rx.T))

    def backward():
        if x.requires_grad:
            x.accumulate_grad(np.matmul(np.matmul(ry.T, out.grad), rx))

    return record_op("resize_bilinear", out, (x,), backward)


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel nearest-neighbor source index per output position."""
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out)
    return np.minimum(np.floor(s), n_in - 1).astype(np.int64)


def resize_nearest(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a numpy array (labels/masks; no autodiff)."""
    h, w = a.shape[-2], a.shape[-1]
    if (h, w) == (out_h, out_w):
        return a
    iy = nearest_index(h, out_h)
    ix = nearest_index(w, out_w)
    return np.ascontiguousarray(a[..., iy[:, None], ix[None, :]])


# ---------------------------------------------------------------------------
# average pooling
# ---------------------------------------------------------------------------


def _pool_counts(h: int, w: int, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    y0 = np.arange(ho) * stride - pad
    x0 = np.arange(wo) * stride - pad
    cy = np.minimum(y0 + k, h) - np.maximum(y0, 0)
    cx = np.minimum(x0 + k, w) - np.maximum(x0, 0)
    counts = np.maximum(np.outer(cy, cx), 1)
    return counts


def avgpool2d(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Mean over k*k windows; zero padding excluded from the divisor."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("empty pooling output")
    # integral image in float64 keeps window sums exact enough for f32 data
    buf = np.zeros((n, c, h + 2 * pad + 1, w + 2 * pad + 1), dtype=np.float64)
    buf[:, :, pad + 1 : pad + 1 + h, pad + 1 : pad + 1 + w] = x.data
    ii = buf.cumsum(axis=2).cumsum(axis=3)
    ys = np.arange(ho) * stride
    xs = np.arange(wo) * stride
    s = (ii[:, :, ys[:, None] + k, xs[None, :] + k]
         - ii[:, :, ys[:, None], xs[None, :] + k]
         - ii[:, :, ys[:, None] + k, xs[None, :]]
         + ii[:, :, ys[:, None], xs[None, :]])
    counts = _pool_counts(h, w, k, stride, pad, ho, wo)
    out = Tensor((s / counts).astype(x.dtype))

    def backward():
        if not x.requires_grad:
            return
        dn = out.grad / counts.astype(x.dtype)
        dpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                dpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dn
        x.accumulate_grad(dpad[:, :, pad : pad + h, pad : pad + w] if pad else dpad)

    return record_op("avgpool2d", out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and losses' building blocks
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))

    def backward():
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, out.grad.reshape(())))

    return record_op("sum", out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return mul_const(sum_all(x), 1.0 / _as_tensor(x).size)


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Elementwise binary cross-entropy from logits, log-sum-exp stable.

    bce = max(z, 0) - z*t + log(1 + exp(-|z|)); gradients flow to the
    logits only (targets are labels).
    """
    logits, target = _as_tensor(logits), _as_tensor(target)
    _check_same_shape(logits, target, "bce_with_logits")
    z, t = logits.data, target.data
    out = Tensor(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def backward():
        if logits.requires_grad:
            logits.accumulate_grad(out.grad * (_sigmoid(z) - t))

    return record_op("bce_with_logits", out, (logits, target), backward)


# ---------------------------------------------------------------------------
# operator sugar on Tensor
# ---------------------------------------------------------------------------


def _coerce(other):
    if isinstance(other, Tensor):
        return other
    if isinstance(other, (int, float)):
        return float(other)
    return NotImplemented


def _install_operators():
    def __add__(self, other):
        o = _coerce(other)
        if o is NotImplemented:
            return NotImplemented
        return add_const(self, o) if isinstance(o, float) else add(self, o)

    def __radd__(self, other):
        return __add__(self, other)

    def __sub__(self, other):
        o = _coerce(other)
        if o is NotImplemented:
            return NotImplemented
        return add_const(self, -o) if isinstance(o, float) else sub(self, o)

    def __rsub__(self, other):
        o = _coerce(other)
        if o is NotImplemented or not isinstance(o, float):
            return NotImplemented
        return add_const(mul_const(self, -1.0), o)

    def __mul__(self, other):
        o = _coerce(other)
        if o is NotImplemented:
            return NotImplemented
        return mul_const(self, o) if isinstance(o, float) else mul(self, o)

    def __rmul__(self, other):
        return __mul__(self, other)

    def __truediv__(self, other):
        o = _coerce(other)
        if o is NotImplemented:
            return NotImplemented
        return mul_const(self, 1.0 / o) if isinstance(o, float) else div(self, o)

    def __neg__(self):
        return mul_const(self, -1.0)

    for name, fn in [("__add__", __add__), ("__radd__", __radd__), ("__sub__", __sub__),
                     ("__rsub__", __rsub__), ("__mul__", __mul__), ("__rmul__", __rmul__),
                     ("__truediv__", __truediv__), ("__neg__", __neg__)]:
        setattr(Tensor, name, fn)


_install_operators()

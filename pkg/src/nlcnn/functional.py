"""Differentiable operations on :class:`~nlcnn.tensor.Tensor`.

Shapes must match exactly; the only implicit expansion is per-channel
parameters (``bias_add``, ``batchnorm2d``) and scalar tensors (``scale``,
``shift``). Every forward result is checked for finiteness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, make_result

Scalar = Union[float, int, Tensor]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _scalar_value(s: Scalar):
    if isinstance(s, Tensor):
        if s.size != 1:
            raise DimensionError(f"expected a scalar tensor, got shape {s.shape}")
        return s.data.reshape(())
    return s


def scale(x: Tensor, s: Scalar) -> Tensor:
    """``s * x`` for a python scalar or a one-element tensor ``s``."""
    x = as_tensor(x)
    sv = _scalar_value(s)
    xd = x.data
    out = (xd * sv).astype(np.result_type(xd, sv), copy=False)
    if isinstance(s, Tensor):
        return make_result("scale", out, (x, s),
                           lambda g: (g * sv, np.sum(g * xd).reshape(s.shape).astype(s.dtype)))
    return make_result("scale", out, (x,), lambda g: (g * sv,))


def shift(x: Tensor, b: Scalar) -> Tensor:
    """``x + b`` for a python scalar or a one-element tensor ``b``."""
    x = as_tensor(x)
    bv = _scalar_value(b)
    out = (x.data + bv).astype(np.result_type(x.data, bv), copy=False)
    if isinstance(b, Tensor):
        return make_result("shift", out, (x, b),
                           lambda g: (g, np.sum(g).reshape(b.shape).astype(b.dtype)))
    return make_result("shift", out, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    out = np.where(keep, x.data, lo).astype(x.dtype)
    return make_result("clamp_min", out, (x,), lambda g: (g * keep,))


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a per-channel vector ``b`` along ``axis`` of ``x``."""
    axis = _norm_axis(axis, x.ndim)
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return make_result("bias_add", x.data + b.data.reshape(view), (x, b),
                       lambda g: (g, g.sum(axis=others)))


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return make_result("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise DimensionError(f"permute: {axes} is not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    return make_result("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(x: Tensor, a: int = -2, b: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    a, b = _norm_axis(a, x.ndim), _norm_axis(b, x.ndim)
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis])):
        raise DimensionError(f"take: indices out of range for axis of length {x.shape[axis]}")
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return make_result("take", np.take(x.data, idx, axis=axis), (x,), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice_axis: [{start}, {stop}) outside axis of length {x.shape[axis]}")
    sl = (slice(None),) * axis + (slice(start, stop),)
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return make_result("slice", np.ascontiguousarray(x.data[sl]), (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def _axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_norm_axis(a, ndim) for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _axes(axis, x.ndim)
    src = x.shape
    keep = tuple(1 if i in axes else n for i, n in enumerate(src))
    out = np.asarray(x.data.sum(axis=axes))
    return make_result("sum", out, (x,),
                       lambda g: (np.broadcast_to(g.reshape(keep), src).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes), 1.0 / count)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero vector has no direction")
    y = x.data / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return make_result("l2_normalize", y, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be identical."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != a.ndim:
        raise DimensionError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
                np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None)

    return make_result("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w (+ b)`` for ``x`` of shape (..., in) and ``w`` of shape (in, out)."""
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        out = bias_add(out, b, axis=-1)
    return reshape(out, lead + (w.shape[1],))


def _conv_nhwc(xd: np.ndarray, wd: np.ndarray, stride, padding, need_dx: bool, need_dw: bool):
    """Channels-last convolution; returns the output and a backward closure."""
    N, H, W, C = xd.shape
    O, _, kh, kw = wd.shape
    sh, sw = stride
    ph, pw = padding
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    Hp, Wp = xd.shape[1:3]
    if (sh, sw) == (1, 1) and kh * kw > 1 and C < 128:
        return _conv_shifted(xd, wd, (N, H, W, C), (Ho, Wo), padding, need_dx, need_dw)
    hspan, wspan = sh * (Ho - 1) + 1, sw * (Wo - 1) + 1
    if kh == kw == 1:
        cols = xd[:, :hspan:sh, :wspan:sw, :].reshape(-1, C)
    else:
        cols = np.concatenate([xd[:, i:i + hspan:sh, j:j + wspan:sw, :]
                               for i in range(kh) for j in range(kw)], axis=-1).reshape(-1, kh * kw * C)
    wmat = wd.transpose(2, 3, 1, 0).reshape(-1, O)
    out = (cols @ wmat).reshape(N, Ho, Wo, O)

    def bw(g):
        gm = g.reshape(-1, O)
        gw = None
        if need_dw:
            gw = np.ascontiguousarray((cols.T @ gm).reshape(kh, kw, C, O).transpose(3, 2, 0, 1))
        gx = None
        if need_dx:
            dcols = (gm @ wmat.T).reshape(N, Ho, Wo, kh, kw, C)
            dxp = np.zeros((N, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + hspan:sh, j:j + wspan:sw, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, ph:ph + H, pw:pw + W, :]
        return gx, gw

    return out, bw


def _conv_shifted(xp: np.ndarray, wd: np.ndarray, in_shape, out_hw, padding, need_dx, need_dw):
    """Stride-1 convolution without im2col.

    With the padded map flattened to rows, kernel tap (i, j) reads the
    contiguous row block starting at ``i * Wp + j``; the output is the sum of
    one matmul per tap, evaluated on the padded grid and then cropped.
    Rows that straddle an image border only land in cropped positions.
    """
    N, H, W, C = in_shape
    Ho, Wo = out_hw
    ph, pw = padding
    O, _, kh, kw = wd.shape
    _, Hp, Wp, _ = xp.shape
    M = N * Hp * Wp
    taps = [(i, j, i * Wp + j) for i in range(kh) for j in range(kw)]
    L = M - taps[-1][2]
    X = xp.reshape(M, C)
    wk = {(i, j): np.ascontiguousarray(wd[:, :, i, j].T) for i, j, _ in taps}
    full = np.zeros((M, O), dtype=np.result_type(xp, wd))
    for i, j, off in taps:
        full[:L] += X[off:off + L] @ wk[i, j]
    out = full.reshape(N, Hp, Wp, O)[:, :Ho, :Wo, :]

    def bw(g):
        G = np.zeros((N, Hp, Wp, O), dtype=g.dtype)
        G[:, :Ho, :Wo, :] = g
        G = G.reshape(M, O)[:L]
        gw = np.empty(wd.shape, dtype=g.dtype) if need_dw else None
        dX = np.zeros((M, C), dtype=g.dtype) if need_dx else None
        for i, j, off in taps:
            if need_dw:
                gw[:, :, i, j] = (X[off:off + L].T @ G).T
            if need_dx:
                dX[off:off + L] += G @ wk[i, j].T
        gx = None if dX is None else dX.reshape(N, Hp, Wp, C)[:, ph:ph + H, pw:pw + W, :]
        return gx, gw

    return np.ascontiguousarray(out), bw


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0, layout: str = "NCHW") -> Tensor:
    """Cross-correlation with zero padding; kernel is O x C x kh x kw.

    ``layout="NCHW"`` takes and returns N x C x H x W maps; ``"NHWC"`` takes
    and returns N x H x W x C maps (the faster internal path).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {w.shape}")
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"unknown layout {layout!r}")
    xd = x.data if layout == "NHWC" else x.data.transpose(0, 2, 3, 1)
    N, H, W, C = xd.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    stride, padding = _pair(stride), _pair(padding)
    if kh > H + 2 * padding[0] or kw > W + 2 * padding[1]:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                             f"{H + 2 * padding[0]}x{W + 2 * padding[1]}")
    out, core_bw = _conv_nhwc(xd, w.data, stride, padding, x.requires_grad, w.requires_grad)
    if layout == "NHWC":
        def bw(g):
            gx, gw = core_bw(g)
            return (None if gx is None else np.ascontiguousarray(gx)), gw
        return make_result("conv2d", out, (x, w), bw)

    def bw_nchw(g):
        gx, gw = core_bw(np.ascontiguousarray(g.transpose(0, 2, 3, 1)))
        return (None if gx is None else np.ascontiguousarray(gx.transpose(0, 3, 1, 2))), gw

    return make_result("conv2d", np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, w), bw_nchw)


# ---------------------------------------------------------------------------
# normalisation and probabilities


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer (buffers, not parameters)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool = True, layout: str = "NCHW") -> Tensor:
    """Per-channel normalisation; batch statistics (and a running-average
    update) in training mode, running statistics otherwise."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected a 4-d map, got {x.shape}")
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"unknown layout {layout!r}")
    axis = 1 if layout == "NCHW" else 3
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,) or state.running_mean.shape != (C,):
        raise DimensionError(f"batchnorm2d: per-channel parameters must have length {C}")
    red = tuple(i for i in range(4) if i != axis)
    view = tuple(C if i == axis else 1 for i in range(4))
    xd = x.data
    gd = gamma.data.reshape(view)
    if training:
        m = xd.size // C
        mu = xd.mean(axis=red)
        centered = xd - mu.reshape(view)
        var = np.mean(centered * centered, axis=red)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std.reshape(view)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean[...] = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var[...] = (1 - state.momentum) * state.running_var + state.momentum * unbiased

        def bw(g):
            dbeta = g.sum(axis=red)
            dgamma = (g * xhat).sum(axis=red)
            coef = (gamma.data * inv_std).reshape(view)
            gx = coef * (g - (dbeta / m).reshape(view) - xhat * (dgamma / m).reshape(view))
            return gx, dgamma, dbeta
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean.reshape(view)) * inv_std.reshape(view)

        def bw(g):
            return (g * (gd * inv_std.reshape(view)), (g * xhat).sum(axis=red), g.sum(axis=red))

    out = (xhat * gd + beta.data.reshape(view)).astype(xd.dtype, copy=False)
    return make_result("batchnorm2d", out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return make_result("softmax", y, (x,),
                       lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_result("log_softmax", out, (x,),
                       lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of N x K ``logits`` against integer ``targets``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: expected N x K logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp)
    N, K = logits.shape
    if t.shape != (N,):
        raise DimensionError(f"cross_entropy: {t.shape[0] if t.ndim else 0} targets for {N} rows")
    if N and (t.min() < 0 or t.max() >= K):
        raise ValueError(f"cross_entropy: target outside [0, {K})")
    ls = log_softmax(logits, axis=1)
    picked = take_along_rows(ls, t)
    terms = scale(picked, -1.0)
    if reduction == "none":
        return terms
    if reduction == "mean":
        return mean(terms)
    if reduction == "sum":
        return sum(terms)
    raise ValueError(f"unknown reduction {reduction!r}")


def take_along_rows(x: Tensor, cols) -> Tensor:
    """``out[i] = x[i, cols[i]]`` for a 2-d ``x``."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(x.shape[0])
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=g.dtype)
        gx[rows, cols] = g
        return (gx,)

    return make_result("take_along_rows", x.data[rows, cols], (x,), bw)

"""Differentiable operators over 5-d ``(B, C, D, H, W)`` activations.

Only what the segmentation network needs is here: no general broadcasting,
no GPU path. Each op computes its forward result in numpy and registers a
closure for the backward pass via :func:`gtvseg.autograd.record`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import special

from .autograd import Tensor, record
from .errors import NonFiniteError, ShapeError

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_AXES = {"D": 2, "H": 3, "W": 4}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected a triple, got {v}")
    return v


def _require_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what}: expected a 5-d (B, C, D, H, W) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return record(out, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, alpha: float) -> Tensor:
    out = Tensor(x.data * alpha)
    return record(out, (x,), lambda g: (g * alpha,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.dtype
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=dtype))
    return record(out, (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand size-1 axes of ``x`` to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise ShapeError(f"broadcast_to: rank {x.ndim} cannot expand to {shape}")
    axes = []
    for i, (s, t) in enumerate(zip(x.shape, shape)):
        if s != t:
            if s != 1:
                raise ShapeError(f"broadcast_to: axis {i} has size {s}, cannot expand to {t}")
            axes.append(i)
    axes = tuple(axes)
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    return record(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_5d(a, "concat_channels")
    _require_5d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: cannot join {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def take_channel(x: Tensor, c: int) -> Tensor:
    """Channel ``c`` of ``x`` as a ``(B, 1, D, H, W)`` tensor."""
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, c:c + 1] = g
        return (gx,)

    out = Tensor(x.data[:, c:c + 1].copy())
    return record(out, (x,), bw)


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.maximum(xd, 0))
    return record(out, (x,), lambda g: (g * (xd > 0),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    xd = x.data
    pos = xd > 0
    out = Tensor(np.where(pos, xd, xd * xd.dtype.type(slope)))
    return record(out, (x,), lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


def sigmoid(x: Tensor) -> Tensor:
    # expit evaluates by sign internally, so exp never overflows
    s = special.expit(x.data)
    out = Tensor(s)
    return record(out, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"activation({kind}): input contains NaN or Inf")
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected relu, leaky_relu or sigmoid")


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, stabilised by subtracting the per-voxel max."""
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels: need >= 2 channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record(out, (x,), bw)


# --------------------------------------------------------------------------
# normalisation


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise ``x`` and the running
    buffers are updated in place (unbiased variance, as is customary).
    """
    _require_5d(x, "batch_norm")
    B, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({C},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    x3 = xd.reshape(B, C, -1)
    n = B * x3.shape[2]
    bshape = (1, C, 1, 1, 1)

    if training:
        if n < 2:
            raise ShapeError(f"batch_norm: training needs >= 2 values per channel, got {n}")
        mean = x3.mean(axis=(0, 2))
        xc = xd - mean.reshape(bshape)
        var = (xc.reshape(B, C, -1) ** 2).mean(axis=(0, 2))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd.reshape(bshape).astype(xd.dtype)
        rm, rv = running_mean.data, running_var.data
        rm *= 1 - momentum
        rm += momentum * mean.astype(rm.dtype)
        rv *= 1 - momentum
        rv += momentum * (var * n / (n - 1)).astype(rv.dtype)
    else:
        invstd = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (xd - running_mean.data.reshape(bshape)) * invstd.reshape(bshape)

    gd = gamma.data
    out = Tensor(xhat * gd.reshape(bshape) + beta.data.reshape(bshape))

    def bw(g):
        g3 = g.reshape(B, C, -1)
        xh3 = xhat.reshape(B, C, -1)
        dbeta = g3.sum(axis=(0, 2))
        dgamma = (g3 * xh3).sum(axis=(0, 2))
        scale_ = (gd * invstd).reshape(bshape)
        if training:
            gx = (g - (dbeta / n).reshape(bshape) - xhat * (dgamma / n).reshape(bshape)) * scale_
        else:
            gx = g * scale_
        return (gx.astype(g.dtype, copy=False), dgamma.astype(gd.dtype), dbeta.astype(gd.dtype))

    return record(out, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# convolution


def _correlate_flat(xf: np.ndarray, w: np.ndarray, padded: tuple[int, int, int]) -> tuple[np.ndarray, int]:
    """Valid correlation on a channel-major, flattened, already padded input.

    ``xf`` is ``(Ci, P)`` with ``P = B * Dp * Hp * Wp``. Returns ``(acc, M)``
    where ``acc[:, p]`` for ``p < M`` is the response at flat position ``p``;
    tap ``(i, j, k)`` reads the input at the constant offset
    ``(i * Hp + j) * Wp + k``. Responses whose receptive field wraps across a
    row or plane edge are garbage and must be cropped by the caller.
    """
    Co, Ci, kd, kh, kw = w.shape
    _, Hp, Wp = padded
    P = xf.shape[1]
    offs = [(i * Hp + j) * Wp + k for i in range(kd) for j in range(kh) for k in range(kw)]
    T = len(offs)
    M = P - offs[-1]
    acc = np.empty((Co, P), dtype=xf.dtype)
    acc[:, M:] = 0
    if Co <= Ci:
        # one GEMM for all taps, then sum the per-tap products at their offsets
        wt = w.reshape(Co, Ci, T).transpose(2, 0, 1).reshape(T * Co, Ci)
        y = wt @ xf
        acc[:, :M] = y[:Co, offs[0]:offs[0] + M]
        for t in range(1, T):
            o = offs[t]
            acc[:, :M] += y[t * Co:(t + 1) * Co, o:o + M]
    else:
        # im2col: gather the shifted copies, then a single GEMM with K = Ci * T
        cols = np.empty((Ci, T, M), dtype=xf.dtype)
        for t, o in enumerate(offs):
            cols[:, t] = xf[:, o:o + M]
        np.matmul(w.reshape(Co, Ci * T), cols.reshape(Ci * T, M), out=acc[:, :M])
    return acc, M


def _pad_channel_major(a: np.ndarray, pad: tuple[int, int, int], dtype) -> np.ndarray:
    """``(B, C, D, H, W)`` -> zero-padded ``(C, B, D+2pd, H+2ph, W+2pw)``."""
    B, C, D, H, W = a.shape
    pd, ph, pw = pad
    out = np.zeros((C, B, D + 2 * pd, H + 2 * ph, W + 2 * pw), dtype=dtype)
    out[:, :, pd:pd + D, ph:ph + H, pw:pw + W] = a.transpose(1, 0, 2, 3, 4)
    return out


def conv3d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride=(1, 1, 1),
    padding=None,
) -> Tensor:
    """3-d cross-correlation with zero padding.

    ``w`` is ``(Cout, Cin, kd, kh, kw)``. Default padding keeps the spatial
    size ("same") for odd kernels. The input gradient is itself a
    correlation of the (stride-dilated, re-padded) output gradient with the
    flipped, channel-transposed kernel, so both directions share one kernel.
    """
    _require_5d(x, "conv3d")
    if w.ndim != 5:
        raise ShapeError(f"conv3d: weight must be 5-d (Cout, Cin, kd, kh, kw), got {w.shape}")
    B, Ci, D, H, W = x.shape
    Co, wCi, kd, kh, kw = w.shape
    if wCi != Ci:
        raise ShapeError(f"conv3d: input channel dimension is {Ci} but weight expects Cin={wCi}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv3d: bias must have shape ({Co},), got {b.shape}")
    if padding is None:
        if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv3d: same padding needs odd kernel dims, got {(kd, kh, kw)}")
        padding = (kd // 2, kh // 2, kw // 2)
    pd, ph, pw = _triple(padding)
    sd, sh, sw = _triple(stride)
    if min(sd, sh, sw) < 1:
        raise ShapeError(f"conv3d: stride must be positive, got {(sd, sh, sw)}")
    if pd > kd - 1 or ph > kh - 1 or pw > kw - 1 or min(pd, ph, pw) < 0:
        raise ShapeError(f"conv3d: padding {(pd, ph, pw)} must lie in [0, k-1] for kernel {(kd, kh, kw)}")
    Dp, Hp, Wp = D + 2 * pd, H + 2 * ph, W + 2 * pw
    Do, Ho, Wo = Dp - kd + 1, Hp - kh + 1, Wp - kw + 1
    if min(Do, Ho, Wo) < 1:
        raise ShapeError(f"conv3d: kernel {(kd, kh, kw)} larger than padded input {(Dp, Hp, Wp)}")

    dtype = np.result_type(x.data, w.data)
    wd = w.data.astype(dtype, copy=False)
    xf = _pad_channel_major(x.data, (pd, ph, pw), dtype).reshape(Ci, -1)
    acc, M = _correlate_flat(xf, wd, (Dp, Hp, Wp))
    full = acc.reshape(Co, B, Dp, Hp, Wp)[:, :, :Do:sd, :Ho:sh, :Wo:sw]
    res = full.transpose(1, 0, 2, 3, 4)
    if b is not None:
        res = res + b.data.reshape(1, Co, 1, 1, 1).astype(dtype, copy=False)
    else:
        res = np.ascontiguousarray(res)
    del acc, full
    out = Tensor(res)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        # output gradient on the dense stride-1 grid of response positions
        if (sd, sh, sw) == (1, 1, 1):
            gd = g
        else:
            gd = np.zeros((B, Co, Do, Ho, Wo), dtype=dtype)
            gd[:, :, ::sd, ::sh, ::sw] = g
        grads = []
        if x.requires_grad:
            qd, qh, qw = kd - 1 - pd, kh - 1 - ph, kw - 1 - pw
            gf = _pad_channel_major(gd, (qd, qh, qw), dtype)
            gdims = gf.shape[2:]
            wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gacc, _ = _correlate_flat(gf.reshape(Co, -1), wflip, gdims)
            gx = gacc.reshape(Ci, B, *gdims)[:, :, :D, :H, :W]
            grads.append(np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4)))
            del gf, gacc
        else:
            grads.append(None)
        if w.requires_grad:
            # dW[:, :, tap] = sum_p g[:, p] x[:, p + offset(tap)]
            gm = np.zeros((Co, B, Dp, Hp, Wp), dtype=dtype)
            gm[:, :, :Do, :Ho, :Wo] = gd.transpose(1, 0, 2, 3, 4)
            gm = gm.reshape(Co, -1)
            offs = [(i * Hp + j) * Wp + k for i in range(kd) for j in range(kh) for k in range(kw)]
            Mw = gm.shape[1] - offs[-1]
            gw = np.stack([gm[:, :Mw] @ xf[:, o:o + Mw].T for o in offs], axis=-1)
            grads.append(gw.reshape(w.shape).astype(w.dtype, copy=False))
        else:
            grads.append(None)
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)).astype(b.dtype, copy=False))
        return tuple(grads)

    return record(out, inputs, bw)


def conv_transpose_inplane(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution with a 1x2x2 kernel and 1x2x2 stride.

    ``w`` is ``(Cin, Cout, 1, 2, 2)``; output is ``(B, Cout, D, 2H, 2W)``.
    The windows do not overlap, so this is one GEMM plus a reshuffle.
    """
    _require_5d(x, "conv_transpose_inplane")
    B, Ci, D, H, W = x.shape
    if w.ndim != 5 or w.shape[0] != Ci or w.shape[2:] != (1, 2, 2):
        raise ShapeError(f"conv_transpose_inplane: weight must be ({Ci}, Cout, 1, 2, 2), got {w.shape}")
    Co = w.shape[1]
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv_transpose_inplane: bias must have shape ({Co},), got {b.shape}")
    dtype = np.result_type(x.data, w.data)
    x2 = x.data.transpose(1, 0, 2, 3, 4).reshape(Ci, -1)
    wm = w.data.reshape(Ci, Co * 4).T.astype(dtype, copy=False)  # (Co*4, Ci), rows (co, p, q)
    y = (wm @ x2).reshape(Co, 2, 2, B, D, H, W)
    res = y.transpose(3, 0, 4, 5, 1, 6, 2).reshape(B, Co, D, 2 * H, 2 * W)
    if b is not None:
        res = res + b.data.reshape(1, Co, 1, 1, 1).astype(dtype, copy=False)
    out = Tensor(res)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g7 = g.reshape(B, Co, D, H, 2, W, 2).transpose(1, 4, 6, 0, 2, 3, 5).reshape(Co * 4, -1)
        gx = (wm.T @ g7).reshape(Ci, B, D, H, W).transpose(1, 0, 2, 3, 4)
        gw = (g7 @ x2.T).T.reshape(w.shape)
        grads = [np.ascontiguousarray(gx), gw.astype(w.dtype, copy=False)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)).astype(b.dtype, copy=False))
        return tuple(grads)

    return record(out, inputs, bw)


# --------------------------------------------------------------------------
# pooling


def max_pool_inplane(x: Tensor) -> Tensor:
    """Max over non-overlapping 1x2x2 windows. Ties route the gradient to the first max."""
    _require_5d(x, "max_pool_inplane")
    B, C, D, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool_inplane: H and W must be even, got H={H}, W={W}")
    win = x.data.reshape(B, C, D, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
    win = win.reshape(B, C, D, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, D, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        return (gw.reshape(B, C, D, H, W),)

    return record(out, (x,), bw)


def pool_mean_axes(x: Tensor, keep_axis: str) -> Tensor:
    """Average over the two spatial axes other than ``keep_axis`` (D, H or W)."""
    _require_5d(x, "pool_mean_axes")
    if keep_axis not in _AXES:
        raise ValueError(f"keep_axis must be one of D, H, W; got {keep_axis!r}")
    k = _AXES[keep_axis]
    axes = tuple(a for a in (2, 3, 4) if a != k)
    shape = x.shape
    count = shape[axes[0]] * shape[axes[1]]
    out = Tensor(x.data.mean(axis=axes, keepdims=True))

    def bw(g):
        return (np.broadcast_to(g / g.dtype.type(count), shape).copy(),)

    return record(out, (x,), bw)

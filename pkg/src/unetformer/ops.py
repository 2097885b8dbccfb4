"""Spatial neural-network operations over NCHW tensors.

Convolution is lowered to batched matrix multiplication via im2col; its
backward pass scatters gradient columns back with one strided add per kernel
offset, which keeps accumulation order fixed and results reproducible.
Pooling and upsampling ops carry exactness guarantees spelled out on each
function.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor
from .errors import ShapeError
from .tensor import Tensor, apply_op


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _require_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (B, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            groups: int) -> tuple[np.ndarray, int, int]:
    """Lower padded input (B, C, Hp, Wp) to columns (B, g, C/g*kh*kw, Ho*Wo)."""
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # (B, C, Ho, Wo, kh, kw) -> (B, C, kh, kw, Ho, Wo)
    win = win.transpose(0, 1, 4, 5, 2, 3)
    cols = np.ascontiguousarray(win).reshape(b, groups, (c // groups) * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and grouped channels."""
    _require_nchw(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.shape}")
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if cin != cg * groups:
        raise ShapeError(
            f"conv2d channel mismatch: input {cin}, weight expects {cg * groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: {cout} output channels not divisible by {groups} groups")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw, groups)
    wr = weight.data.reshape(groups, cout // groups, cg * kh * kw)
    out = np.matmul(wr, cols)                       # (B, g, Cout/g, Ho*Wo)
    out = out.reshape(b, cout, ho, wo)
    tensor.macs_counter.add(b * cout * ho * wo * cg * kh * kw)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    need_x, need_w = x.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def rule(g):
        gr = g.reshape(b, groups, cout // groups, ho * wo)
        gw = gb = gx = None
        if need_w:
            gw = np.matmul(gr, cols.swapaxes(-1, -2)).sum(axis=0)
            gw = gw.reshape(cout, cg, kh, kw)
        if need_b:
            gb = g.sum(axis=(0, 2, 3))
        if need_x:
            gcols = np.matmul(wr.swapaxes(-1, -2), gr)   # (B, g, CgK, L)
            gcols = gcols.reshape(b, cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, i, j]
            gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w])
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv2d", out, inputs, rule)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (B, H, W).

    Training mode normalizes with batch statistics and folds them into the
    running estimates in place (unbiased variance for the running update);
    eval mode normalizes with the running estimates only.
    """
    _require_nchw(x, "batchnorm2d")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine shapes {gamma.shape}/{beta.shape} != ({c},)")

    if training:
        n = b * h * w
        if n < 2:
            raise ShapeError("batchnorm2d training requires more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / (n - 1))
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    need_x, need_g, need_b = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def rule(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if (need_g or (need_x and training)) else None
        gb = g.sum(axis=(0, 2, 3)) if (need_b or (need_x and training)) else None
        gx = None
        if need_x:
            scale = (gamma.data * inv).reshape(1, c, 1, 1)
            if training:
                n = b * h * w
                gx = scale * (g - (gb / n).reshape(1, c, 1, 1)
                              - xhat * (gg / n).reshape(1, c, 1, 1))
            else:
                gx = scale * g
            gx = gx.astype(x.dtype, copy=False)
        return (gx,
                gg.astype(gamma.dtype, copy=False) if need_g else None,
                gb.astype(beta.dtype, copy=False) if need_b else None)

    return apply_op("batchnorm2d", out.astype(x.dtype, copy=False),
                    (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Max pooling; ties resolve to the first window position in row-major order."""
    _require_nchw(x, "max_pool2d")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    if ph >= kh or pw >= kw:
        raise ShapeError("max_pool2d padding must be smaller than the kernel")
    b, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                constant_values=-np.inf)
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise ShapeError(f"max_pool2d: kernel ({kh},{kw}) larger than padded input")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(b, c, ho, wo, kh * kw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gxp = np.zeros_like(xp)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            contrib = np.where(idx == k, g, 0.0)
            gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += contrib
        return (np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w]),)

    return apply_op("max_pool2d", np.ascontiguousarray(out), (x,), rule)


def _windowed_sum(v: np.ndarray, axis: int, left: int, right: int) -> np.ndarray:
    """Sum of v over [p-left, p+right] clipped to bounds, along `axis`."""
    n = v.shape[axis]
    v = np.moveaxis(v, axis, -1)
    s = np.concatenate([np.zeros(v.shape[:-1] + (1,), dtype=v.dtype),
                        np.cumsum(v, axis=-1)], axis=-1)
    p = np.arange(n)
    hi = np.minimum(p + right + 1, n)
    lo = np.maximum(p - left, 0)
    out = np.take(s, hi, axis=-1) - np.take(s, lo, axis=-1)
    return np.moveaxis(out, -1, axis)


def _window_counts(n: int, left: int, right: int) -> np.ndarray:
    p = np.arange(n)
    return (np.minimum(p + right, n - 1) - np.maximum(p - left, 0) + 1).astype(np.float64)


def strip_avg_pool(x: Tensor, window: int, along: str) -> Tensor:
    """Same-size average over a 1-D strip of `window` positions.

    The strip at position p covers [p - (window-1)//2, p + window//2] along
    the H axis (`along="h"`) or the W axis (`along="w"`); out-of-bounds
    positions are dropped and the divisor is the in-bounds count. Sums run
    in float64 via cumulative sums, so a constant input reproduces the
    constant bit-exactly in float32.
    """
    _require_nchw(x, "strip_avg_pool")
    if window < 1:
        raise ShapeError(f"strip_avg_pool window must be >= 1, got {window}")
    if along not in ("h", "w"):
        raise ShapeError(f"strip_avg_pool along must be 'h' or 'w', got {along!r}")
    axis = 2 if along == "h" else 3
    left = (window - 1) // 2
    right = window - 1 - left
    n = x.shape[axis]

    counts = _window_counts(n, left, right)
    cshape = [1, 1, 1, 1]
    cshape[axis] = n
    counts = counts.reshape(cshape)
    out = _windowed_sum(x.data.astype(np.float64), axis, left, right) / counts

    def rule(g):
        # position q receives g[p]/count[p] for every window containing q,
        # which is the same strip sum with the extents mirrored
        gn = g.astype(np.float64) / counts
        gx = _windowed_sum(gn, axis, right, left)
        return (gx.astype(x.dtype),)

    return apply_op("strip_avg_pool", out.astype(x.dtype), (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, keeping H and W as singleton axes."""
    _require_nchw(x, "global_avg_pool")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def rule(g):
        return ((np.broadcast_to(g / (h * w), x.shape)).astype(x.dtype, copy=True),)

    return apply_op("global_avg_pool", out, (x,), rule)


# ---------------------------------------------------------------------------
# upsampling


def _interp_axis(n_in: int, scale: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-centre source indices and weights for one axis."""
    dst = np.arange(n_in * scale, dtype=np.float64)
    src = np.clip((dst + 0.5) / scale - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    return i0, i1, t


def bilinear_upsample(x: Tensor, scale: int) -> Tensor:
    """Integer-factor bilinear upsampling with half-pixel sample centres.

    Evaluated in the form x0 + t*(x1 - x0), so a constant map upsamples to
    the same constant bit-exactly.
    """
    _require_nchw(x, "bilinear_upsample")
    scale = int(scale)
    if scale < 1:
        raise ShapeError(f"bilinear_upsample scale must be >= 1, got {scale}")
    tensor.macs_counter.add(4 * x.size * scale * scale)
    if scale == 1:
        return apply_op("bilinear_upsample", x.data.copy(), (x,),
                        lambda g: (g.copy(),))
    b, c, h, w = x.shape
    i0, i1, ty = _interp_axis(h, scale)
    j0, j1, tx = _interp_axis(w, scale)
    ty_col = ty.astype(x.dtype).reshape(1, 1, -1, 1)
    tx_row = tx.astype(x.dtype).reshape(1, 1, 1, -1)

    rows0 = x.data[:, :, i0, :]
    rows1 = x.data[:, :, i1, :]
    mid = rows0 + ty_col * (rows1 - rows0)          # (B, C, H*s, W)
    left = mid[:, :, :, j0]
    right = mid[:, :, :, j1]
    out = left + tx_row * (right - left)

    def rule(g):
        ry = np.zeros((h * scale, h))
        np.add.at(ry, (np.arange(h * scale), i0), 1.0 - ty)
        np.add.at(ry, (np.arange(h * scale), i1), ty)
        rx = np.zeros((w * scale, w))
        np.add.at(rx, (np.arange(w * scale), j0), 1.0 - tx)
        np.add.at(rx, (np.arange(w * scale), j1), tx)
        g64 = g.astype(np.float64)
        gx = np.matmul(np.matmul(ry.T, g64), rx)
        return (gx.astype(x.dtype),)

    return apply_op("bilinear_upsample", np.ascontiguousarray(out), (x,), rule)

"""Differentiable feature-map ops: convolution, pooling, resampling, BN, losses.

All feature maps are NCHW float32.  Convolutions dispatch to three kernels:
pointwise (1x1, a batched GEMM), depthwise (groups == channels, a loop over
kernel taps) and a general im2col path for everything else.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import kernels
from .errors import InvalidConfig, NumericalError, ShapeMismatch
from .tensor import DTYPE, Tensor, as_tensor, check_finite, make_result

# -- convolution ------------------------------------------------------------


def conv_out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _tap(a: np.ndarray, i: int, j: int, dil: int, stride: int, ho: int, wo: int) -> np.ndarray:
    r, c = i * dil, j * dil
    return a[:, :, r : r + stride * (ho - 1) + 1 : stride, c : c + stride * (wo - 1) + 1 : stride]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _chan_sum(a: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def _pointwise_fwd(x, w, stride):
    xs = x if stride == 1 else np.ascontiguousarray(x[:, :, ::stride, ::stride])
    n, c, ho, wo = xs.shape
    w2 = w.reshape(w.shape[0], c)
    y = np.matmul(w2, xs.reshape(n, c, ho * wo)).reshape(n, -1, ho, wo)

    def back(gy, need_gx=True):
        gflat = gy.reshape(n, -1, ho * wo)
        gw = np.matmul(gflat, xs.reshape(n, c, ho * wo).transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if not need_gx:
            return None, gw
        gxs = np.matmul(w2.T, gflat).reshape(n, c, ho, wo)
        if stride == 1:
            return gxs, gw
        gx = np.zeros(x.shape, DTYPE)
        gx[:, :, ::stride, ::stride] = gxs
        return gx, gw

    return y, back


def _depthwise_fwd(x, w, stride, pad, dil):
    if kernels.ENABLED:
        return _depthwise_fwd_compiled(x, w, stride, pad, dil)
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho, wo = conv_out_size(h, kh, stride, pad, dil), conv_out_size(wd, kw, stride, pad, dil)
    xp = _pad(x, pad)
    y = np.empty((n, c, ho, wo), DTYPE)
    tmp = np.empty_like(y)
    first = True
    for i in range(kh):
        for j in range(kw):
            wij = w[:, 0, i, j].reshape(1, c, 1, 1)
            if first:
                np.multiply(_tap(xp, i, j, dil, stride, ho, wo), wij, out=y)
                first = False
            else:
                np.multiply(_tap(xp, i, j, dil, stride, ho, wo), wij, out=tmp)
                y += tmp

    def back(gy, need_gx=True):
        gxp = np.zeros(xp.shape, DTYPE)
        gw = np.empty(w.shape, DTYPE)
        buf = np.empty_like(gy)
        for i in range(kh):
            for j in range(kw):
                view = _tap(gxp, i, j, dil, stride, ho, wo)
                np.multiply(gy, w[:, 0, i, j].reshape(1, c, 1, 1), out=buf)
                view += buf
                np.multiply(gy, _tap(xp, i, j, dil, stride, ho, wo), out=buf)
                gw[:, 0, i, j] = _chan_sum(buf)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return np.ascontiguousarray(gx), gw

    return y, back


def _depthwise_fwd_compiled(x, w, stride, pad, dil):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho, wo = conv_out_size(h, kh, stride, pad, dil), conv_out_size(wd, kw, stride, pad, dil)
    xc = np.ascontiguousarray(x)
    wc = np.ascontiguousarray(w)
    y = kernels.depthwise_forward(xc, wc, stride, pad, dil, ho, wo)

    def back(gy, need_gx=True):
        gx, gw = kernels.depthwise_backward(xc, wc, np.ascontiguousarray(gy), stride, pad, dil, need_gx)
        return (gx if need_gx else None), gw

    return y, back


def _im2col_fwd(x, w, stride, pad, dil):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = conv_out_size(h, kh, stride, pad, dil), conv_out_size(wd, kw, stride, pad, dil)
    xp = _pad(x, pad)
    cols = np.empty((n, c, kh, kw, ho, wo), DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = _tap(xp, i, j, dil, stride, ho, wo)
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = w.reshape(o, -1)
    y = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def back(gy, need_gx=True):
        gflat = gy.reshape(n, o, ho * wo)
        gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if not need_gx:
            return None, gw
        gxp = np.zeros(xp.shape, DTYPE)
        for i in range(kh):
            for j in range(kw):
                wt = np.ascontiguousarray(w[:, :, i, j].T)
                _tap(gxp, i, j, dil, stride, ho, wo)[...] += np.matmul(wt, gflat).reshape(n, c, ho, wo)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return np.ascontiguousarray(gx), gw

    return y, back


def _grouped_fwd(x, w, stride, pad, dil, groups):
    c = x.shape[1]
    o = w.shape[0]
    cg, og = c // groups, o // groups
    outs, backs = [], []
    for g in range(groups):
        xg = np.ascontiguousarray(x[:, g * cg : (g + 1) * cg])
        y, b = _im2col_fwd(xg, w[g * og : (g + 1) * og], stride, pad, dil)
        outs.append(y)
        backs.append(b)
    y = np.concatenate(outs, axis=1)

    def back(gy, need_gx=True):
        gx = np.empty(x.shape, DTYPE) if need_gx else None
        gw = np.empty(w.shape, DTYPE)
        for g, b in enumerate(backs):
            gxg, gwg = b(np.ascontiguousarray(gy[:, g * og : (g + 1) * og]), need_gx)
            if need_gx:
                gx[:, g * cg : (g + 1) * cg] = gxg
            gw[g * og : (g + 1) * og] = gwg
        return gx, gw

    return y, back


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of an NCHW map with OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or dilation < 1 or groups < 1 or pad < 0:
        raise InvalidConfig(f"stride={stride}, dilation={dilation}, groups={groups}, pad={pad}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input and OIHW weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeMismatch(f"input channels {c} / weights {w.shape} incompatible with groups={groups}")
    if h + 2 * pad < dilation * (kh - 1) + 1 or wd + 2 * pad < dilation * (kw - 1) + 1:
        raise ShapeMismatch(f"padded input {h}x{wd} smaller than the effective kernel")
    if b is not None and b.shape != (o,):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {o} output channels")

    xd, wdat = x.data, w.data
    if kh == kw == 1 and pad == 0 and groups == 1:
        y, kernel_back = _pointwise_fwd(xd, wdat, stride)
    elif groups == c and o == c:
        y, kernel_back = _depthwise_fwd(xd, wdat, stride, pad, dilation)
    elif groups == 1:
        y, kernel_back = _im2col_fwd(xd, wdat, stride, pad, dilation)
    else:
        y, kernel_back = _grouped_fwd(xd, wdat, stride, pad, dilation, groups)
    if b is not None:
        y += b.data.reshape(1, o, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def back(gy):
        gx, gw = kernel_back(gy, x.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, _chan_sum(gy)

    return make_result(y, parents, back, "conv2d")


# -- pooling ----------------------------------------------------------------


def max_pool2x2(x: Tensor) -> Tensor:
    """Max pooling with a 2x2 window and stride 2 (odd trailing rows dropped)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeMismatch(f"max_pool2x2 needs NCHW with H,W >= 2, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.data[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)[..., None]
    y = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, c, ho, wo, 4), DTYPE)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        if (2 * ho, 2 * wo) == (h, w):
            return (gw,)
        gx = np.zeros(x.shape, DTYPE)
        gx[:, :, : 2 * ho, : 2 * wo] = gw
        return (gx,)

    return make_result(y, (x,), back, "max_pool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool needs NCHW, got {x.shape}")
    n, c, h, w = x.shape
    y = x.data.reshape(n, c, h * w).mean(axis=2, dtype=DTYPE).reshape(n, c, 1, 1)
    scale = DTYPE(1.0 / (h * w))
    return make_result(y, (x,), lambda g: (np.broadcast_to(g * scale, x.shape).copy(),), "global_avg_pool")


def pool(x: Tensor, kind: str) -> Tensor:
    if kind == "max2x2_s2":
        return max_pool2x2(x)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise InvalidConfig(f"unknown pool kind {kind!r}")


def _adaptive_matrix(size: int, bins: int) -> np.ndarray:
    m = np.zeros((bins, size), np.float64)
    for i in range(bins):
        start = (i * size) // bins
        end = -((-(i + 1) * size) // bins)
        m[i, start:end] = 1.0 / (end - start)
    return m.astype(DTYPE)


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average-pool to ``bins x bins`` cells with possibly overlapping windows."""
    x = as_tensor(x)
    if x.ndim != 4 or bins < 1:
        raise ShapeMismatch(f"adaptive_avg_pool needs NCHW and bins >= 1, got {x.shape}, {bins}")
    ph = _adaptive_matrix(x.shape[2], bins)
    pw = _adaptive_matrix(x.shape[3], bins)
    y = ph @ x.data @ pw.T
    return make_result(y, (x,), lambda g: (ph.T @ g @ pw,), "adaptive_avg_pool")


# -- bilinear resampling ----------------------------------------------------


def _lerp_coords(in_size: int, out_size: int):
    """Source indices and weights for half-pixel (align_corners=False) sampling.

    Output pixel ``d`` reads source coordinate
    ``s = (d + 0.5) * in_size / out_size - 0.5`` clamped below at 0, and
    blends ``floor(s)`` and ``floor(s) + 1`` (clamped to the last row).
    """
    d = np.arange(out_size, dtype=np.float64)
    src = np.maximum((d + 0.5) * (in_size / out_size) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = (src - i0).astype(DTYPE)
    mat = np.zeros((out_size, in_size), DTYPE)
    np.add.at(mat, (np.arange(out_size), i0), 1 - frac)
    np.add.at(mat, (np.arange(out_size), i1), frac)
    return i0, i1, frac, mat


def _lerp_rows(a: np.ndarray, i0, i1, frac) -> np.ndarray:
    lo = a[:, :, i0, :]
    return lo + frac.reshape(-1, 1) * (a[:, :, i1, :] - lo)


def _lerp_cols(a: np.ndarray, i0, i1, frac) -> np.ndarray:
    if kernels.ENABLED:
        flat = np.ascontiguousarray(a).reshape(-1, a.shape[-1])
        return kernels.lerp_last(flat, i0, i1, frac).reshape(a.shape[:-1] + (len(i0),))
    lo = a[:, :, :, i0]
    return lo + frac * (a[:, :, :, i1] - lo)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize to ``size`` = (H, W); constant maps stay exactly constant."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"resize needs NCHW, got {x.shape}")
    h, w = x.shape[2:]
    ho, wo = size
    if (ho, wo) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "resize")
    r0, r1, rf, rm = _lerp_coords(h, ho)
    c0, c1, cf, cm = _lerp_coords(w, wo)
    y = x.data
    if ho != h:
        y = _lerp_rows(y, r0, r1, rf)
    if wo != w:
        y = _lerp_cols(y, c0, c1, cf)
    y = np.ascontiguousarray(y, dtype=DTYPE)

    def back(g):
        if wo != w:
            g = g @ cm
        if ho != h:
            g = rm.T @ g
        return (np.ascontiguousarray(g),)

    return make_result(y, (x,), back, "resize")


SUPPORTED_FACTORS = {Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2), Fraction(4), Fraction(8), Fraction(16)}


def resample(x: Tensor, factor) -> Tensor:
    """Bilinear up/down-sampling by a power-of-two ``factor`` (1/8 .. 16)."""
    x = as_tensor(x)
    f = Fraction(factor).limit_denominator(64)
    if f not in SUPPORTED_FACTORS:
        raise InvalidConfig(f"unsupported resampling factor {factor}")
    if f == 1:
        return make_result(x.data, (x,), lambda g: (g,), "resample")
    h, w = x.shape[2:]
    ho, wo = h * f, w * f
    if ho.denominator != 1 or wo.denominator != 1 or ho < 1 or wo < 1:
        raise InvalidConfig(f"factor {factor} gives non-integral extents from {h}x{w}")
    return resize_bilinear(x, (int(ho), int(wo)))


# -- normalization and dense layers ----------------------------------------------


CLAMPS = {None: (-np.inf, np.inf), "none": (-np.inf, np.inf), "relu": (0.0, np.inf), "relu6": (0.0, 6.0)}


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    activation: str | None = None,
) -> Tensor:
    """Per-channel batch normalization, optionally followed by relu/relu6.

    Updates the running statistics in place when training; the running
    variance uses the unbiased batch variance.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeMismatch(f"batch_norm: input {x.shape} vs {gamma.shape[0]} channels")
    if activation not in CLAMPS:
        raise InvalidConfig(f"batch_norm activation must be relu, relu6 or none, got {activation!r}")
    lo, hi = CLAMPS[activation]
    n, c, h, w = x.shape
    m = n * h * w
    xd = x.data
    g = gamma.data.reshape(1, c, 1, 1)
    if training and kernels.ENABLED:
        xc = np.ascontiguousarray(xd)
        y, mu, var, inv = kernels.bn_train_forward(xc, gamma.data, beta.data, eps, lo, hi)

        def back(gy):
            return kernels.bn_train_backward(np.ascontiguousarray(gy), xc, y, mu, gamma.data, inv, lo, hi)

    elif training:
        flat = xd.reshape(n, c, h * w)
        mu = flat.astype(np.float64).mean(axis=2).mean(axis=0)
        centered = xd - mu.astype(DTYPE).reshape(1, c, 1, 1)
        var = _chan_sum(centered.astype(np.float64) ** 2) / m
        inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
        xhat = centered * inv.reshape(1, c, 1, 1)
        y = np.clip(xhat * g + beta.data.reshape(1, c, 1, 1), lo, hi).astype(DTYPE)

        def back(gy):
            gy = gy * ((y > lo) & (y < hi))
            gb = _chan_sum(gy)
            gg = _chan_sum(gy * xhat)
            scale = (gamma.data * inv / m).reshape(1, c, 1, 1)
            gx = scale * (m * gy - gb.reshape(1, c, 1, 1) - xhat * gg.reshape(1, c, 1, 1))
            return gx.astype(DTYPE, copy=False), gg, gb

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(DTYPE)
        scale = (gamma.data * inv).reshape(1, c, 1, 1)
        shift = (beta.data - running_mean * gamma.data * inv).reshape(1, c, 1, 1)
        y = xd * scale + shift
        if activation not in (None, "none"):
            np.clip(y, lo, hi, out=y)

        def back(gy):
            gy = gy * ((y > lo) & (y < hi))
            xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
            return gy * scale, _chan_sum(gy * xhat), _chan_sum(gy)

    if training:
        running_mean *= 1 - momentum
        running_mean += (momentum * mu).astype(DTYPE)
        running_var *= 1 - momentum
        running_var += (momentum * var * (m / max(m - 1, 1))).astype(DTYPE)
    return make_result(y.astype(DTYPE, copy=False), (x, gamma, beta), back, "batch_norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x of shape (N, in) and w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if b is not None:
        y = y + b.data

    def back(g):
        grads = (g @ wd, g.T @ xd)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return make_result(check_finite(y, "linear"), parents, back, "linear")


BCE_EPS = 1e-7


def binary_cross_entropy(p: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean per-pixel BCE on probabilities, logs taken of values clamped to [eps, 1-eps]."""
    p = as_tensor(p)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    pd = p.data.astype(np.float64)
    pc = np.clip(pd, eps, 1 - eps)
    loss = -np.mean(t * np.log(pc) + (1 - t) * np.log1p(-pc))
    if not np.isfinite(loss):
        raise NumericalError("binary cross-entropy is not finite")
    inside = (pd > eps) & (pd < 1 - eps)

    def back(g):
        d = (-(t / pc) + (1 - t) / (1 - pc)) * inside / t.size
        return ((float(g) * d).astype(DTYPE),)

    return make_result(np.asarray(loss, DTYPE), (p,), back, "bce")

"""Compiled inner loops for the memory-bound ops (depthwise conv, batch norm).

The numpy implementations in ``ops`` stay the reference; these kernels are
swapped in when numba is importable and are checked against them in tests.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

AVAILABLE = numba is not None
# Set False to force the numpy reference paths.
ENABLED = AVAILABLE
# Reassociation lets the reductions vectorize; order stays fixed per build, so
# results remain run-to-run deterministic.
_FLAGS = {"reassoc", "nsz", "contract"}


def _jit(fn):
    return numba.njit(cache=True, fastmath=_FLAGS, nogil=True)(fn) if AVAILABLE else fn


# Depthwise conv works plane by plane.  The zero-padded input plane is split
# into stride x stride phase planes, each stored flat with row pitch ``wps``;
# every kernel tap then reads one phase plane at a constant offset, so the
# inner loops run over ``(ho - 1) * wps + wo`` contiguous elements.  Outputs
# landing in the pitch gap are discarded.


@_jit
def _split_phases(phases, src, pad, stride, hps, wps):
    """Scatter ``src`` (zero-padded by ``pad``) into the flat phase buffer."""
    h, w = src.shape
    size = hps * wps
    phases[:] = 0.0
    for pr_ in range(stride):
        for pc_ in range(stride):
            base = (pr_ * stride + pc_) * size
            for rr in range(hps):
                r = rr * stride + pr_ - pad
                if r < 0 or r >= h:
                    continue
                row = src[r]
                off = base + rr * wps
                for qq in range(wps):
                    q = qq * stride + pc_ - pad
                    if 0 <= q < w:
                        phases[off + qq] = row[q]


@_jit
def _merge_phases(dst, phases, pad, stride, hps, wps):
    h, w = dst.shape
    size = hps * wps
    for pr_ in range(stride):
        for pc_ in range(stride):
            base = (pr_ * stride + pc_) * size
            for rr in range(hps):
                r = rr * stride + pr_ - pad
                if r < 0 or r >= h:
                    continue
                row = dst[r]
                off = base + rr * wps
                for qq in range(wps):
                    q = qq * stride + pc_ - pad
                    if 0 <= q < w:
                        row[q] = phases[off + qq]


@_jit
def _geometry(h, w, pad, stride):
    hps = (h + 2 * pad + stride - 1) // stride
    wps = (w + 2 * pad + stride - 1) // stride
    return hps, wps


@_jit
def depthwise_forward(x, w, stride, pad, dil, ho, wo):
    """Depthwise cross-correlation with implicit zero padding."""
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    hps, wps = _geometry(h, wd, pad, stride)
    span = (ho - 1) * wps + wo
    phases = np.zeros(stride * stride * hps * wps, np.float32)
    acc = np.empty(span, np.float32)
    y = np.empty((n, c, ho, wo), np.float32)
    for b in range(n):
        for ch in range(c):
            _split_phases(phases, x[b, ch], pad, stride, hps, wps)
            acc[:] = 0.0
            for i in range(kh):
                for j in range(kw):
                    ra, ca = i * dil, j * dil
                    start = ((ra % stride) * stride + ca % stride) * hps * wps + (ra // stride) * wps + ca // stride
                    src = phases[start : start + span]
                    wij = w[ch, 0, i, j]
                    for k in range(span):
                        acc[k] += wij * src[k]
            dst = y[b, ch]
            for r in range(ho):
                base = r * wps
                for q in range(wo):
                    dst[r, q] = acc[base + q]
    return y


@_jit
def depthwise_backward(x, w, gy, stride, pad, dil, need_gx):
    n, c, ho, wo = gy.shape
    h, wd = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    hps, wps = _geometry(h, wd, pad, stride)
    span = (ho - 1) * wps + wo
    phases = np.zeros(stride * stride * hps * wps, np.float32)
    gphases = np.zeros(stride * stride * hps * wps, np.float32)
    g = np.zeros(span, np.float32)
    gx = np.zeros(x.shape if need_gx else (1, 1, 1, 1), np.float32)
    gw = np.zeros(w.shape, np.float32)
    for b in range(n):
        for ch in range(c):
            _split_phases(phases, x[b, ch], pad, stride, hps, wps)
            gs = gy[b, ch]
            for r in range(ho):
                base = r * wps
                for q in range(wo):
                    g[base + q] = gs[r, q]
            if need_gx:
                gphases[:] = 0.0
            for i in range(kh):
                for j in range(kw):
                    ra, ca = i * dil, j * dil
                    start = ((ra % stride) * stride + ca % stride) * hps * wps + (ra // stride) * wps + ca // stride
                    src = phases[start : start + span]
                    acc = np.float32(0.0)
                    for k in range(span):
                        acc += g[k] * src[k]
                    gw[ch, 0, i, j] += acc
                    if need_gx:
                        wij = w[ch, 0, i, j]
                        dst = gphases[start : start + span]
                        for k in range(span):
                            dst[k] += wij * g[k]
            if need_gx:
                _merge_phases(gx[b, ch], gphases, pad, stride, hps, wps)
    return gx, gw


@_jit
def bn_train_forward(x, gamma, beta, eps, lo, hi):
    """Batch statistics (float64 accumulation), affine output clamped to [lo, hi]."""
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c, np.float64)
    var = np.zeros(c, np.float64)
    for ch in range(c):
        s = 0.0
        s2 = 0.0
        for b in range(n):
            plane = x[b, ch]
            for r in range(h):
                row = plane[r]
                for q in range(w):
                    v = np.float64(row[q])
                    s += v
                    s2 += v * v
        mu = s / m
        mean[ch] = mu
        var[ch] = max(s2 / m - mu * mu, 0.0)
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    mu32 = mean.astype(np.float32)
    lo32, hi32 = np.float32(lo), np.float32(hi)
    y = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            a = inv[ch] * gamma[ch]
            sh = beta[ch] - mu32[ch] * a
            xs = x[b, ch]
            ys = y[b, ch]
            for r in range(h):
                xr = xs[r]
                yr = ys[r]
                for q in range(w):
                    yr[q] = min(max(xr[q] * a + sh, lo32), hi32)
    return y, mean, var, inv


@_jit
def bn_train_backward(gy, x, y, mean, gamma, inv, lo, hi):
    """Gradients of the clamped BN; ``gy`` passes only where ``lo < y < hi``."""
    n, c, h, w = gy.shape
    m = n * h * w
    gb = np.zeros(c, np.float32)
    gg = np.zeros(c, np.float32)
    mu32 = mean.astype(np.float32)
    lo32, hi32 = np.float32(lo), np.float32(hi)
    for ch in range(c):
        sb = 0.0
        sg = 0.0
        mu = mu32[ch]
        a = inv[ch]
        for b in range(n):
            g = gy[b, ch]
            xs = x[b, ch]
            ys = y[b, ch]
            for r in range(h):
                gr = g[r]
                xr = xs[r]
                yr = ys[r]
                for q in range(w):
                    gv = gr[q] if (yr[q] > lo32 and yr[q] < hi32) else np.float32(0.0)
                    sb += gv
                    sg += gv * ((xr[q] - mu) * a)
        gb[ch] = sb
        gg[ch] = sg
    gx = np.empty_like(gy)
    for b in range(n):
        for ch in range(c):
            scale = gamma[ch] * inv[ch] / m
            mb = gb[ch]
            mg = gg[ch]
            mu = mu32[ch]
            a = inv[ch]
            g = gy[b, ch]
            xs = x[b, ch]
            ys = y[b, ch]
            out = gx[b, ch]
            for r in range(h):
                gr = g[r]
                xr = xs[r]
                yr = ys[r]
                orow = out[r]
                for q in range(w):
                    gv = gr[q] if (yr[q] > lo32 and yr[q] < hi32) else np.float32(0.0)
                    orow[q] = scale * (m * gv - mb - ((xr[q] - mu) * a) * mg)
    return gx, gg, gb


@_jit
def relu6_forward(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for k in range(flat.size):
        v = flat[k]
        out[k] = 0.0 if v < 0.0 else (6.0 if v > 6.0 else v)
    return out.reshape(x.shape)


@_jit
def relu6_backward(g, x):
    gf = g.ravel()
    xf = x.ravel()
    out = np.empty_like(gf)
    for k in range(gf.size):
        v = xf[k]
        out[k] = gf[k] if (v > 0.0 and v < 6.0) else 0.0
    return out.reshape(g.shape)


@_jit
def lerp_last(a, i0, i1, frac):
    """Rows of a 2-D array resampled along the last axis: ``lo + frac*(hi - lo)``."""
    rows = a.shape[0]
    wo = i0.size
    out = np.empty((rows, wo), np.float32)
    for r in range(rows):
        src = a[r]
        dst = out[r]
        for q in range(wo):
            lo = src[i0[q]]
            dst[q] = lo + frac[q] * (src[i1[q]] - lo)
    return out

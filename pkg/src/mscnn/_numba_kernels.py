"""Numba-compiled hot kernels.

All kernels run on pre-padded inputs, parallelize over disjoint output
slices (no cross-thread reductions) and keep a fixed summation order, so
outputs are bit-identical from call to call regardless of thread count.
Convolution accumulates channel-major, then kernel row, then kernel column.
fastmath stays off: SIMD comes from vectorizing across independent output
columns, never from reassociating a reduction.
"""

import numpy as np
from numba import njit, prange

_JIT = dict(cache=True, parallel=True, fastmath=False)


@njit(**_JIT)
def conv2d_padded(xp, w, b, stride):
    # xp: (n, cin, hp, wp) zero-padded input; w: (cout, cin, kh, kw)
    # valid-mode correlation; 4 output channels per task share input rows.
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.empty((n, cout, ho, wo), xp.dtype)
    nblk = (cout + 3) // 4
    for t in prange(n * nblk):
        i = t // nblk
        co0 = (t % nblk) * 4
        cn = min(4, cout - co0)
        acc = np.empty((4, wo), xp.dtype)
        for oy in range(ho):
            if cn == 4:
                for ox in range(wo):
                    acc[0, ox] = b[co0]
                    acc[1, ox] = b[co0 + 1]
                    acc[2, ox] = b[co0 + 2]
                    acc[3, ox] = b[co0 + 3]
                for ci in range(cin):
                    for ky in range(kh):
                        xrow = xp[i, ci, oy * stride + ky]
                        for kx in range(kw):
                            w0 = w[co0, ci, ky, kx]
                            w1 = w[co0 + 1, ci, ky, kx]
                            w2 = w[co0 + 2, ci, ky, kx]
                            w3 = w[co0 + 3, ci, ky, kx]
                            if stride == 1:
                                for ox in range(wo):
                                    xv = xrow[ox + kx]
                                    acc[0, ox] += w0 * xv
                                    acc[1, ox] += w1 * xv
                                    acc[2, ox] += w2 * xv
                                    acc[3, ox] += w3 * xv
                            else:
                                for ox in range(wo):
                                    xv = xrow[ox * stride + kx]
                                    acc[0, ox] += w0 * xv
                                    acc[1, ox] += w1 * xv
                                    acc[2, ox] += w2 * xv
                                    acc[3, ox] += w3 * xv
                for j in range(4):
                    for ox in range(wo):
                        out[i, co0 + j, oy, ox] = acc[j, ox]
            else:
                for j in range(cn):
                    for ox in range(wo):
                        acc[j, ox] = b[co0 + j]
                    for ci in range(cin):
                        for ky in range(kh):
                            xrow = xp[i, ci, oy * stride + ky]
                            for kx in range(kw):
                                wv = w[co0 + j, ci, ky, kx]
                                for ox in range(wo):
                                    acc[j, ox] += wv * xrow[ox * stride + kx]
                    for ox in range(wo):
                        out[i, co0 + j, oy, ox] = acc[j, ox]
    return out


@njit(**_JIT)
def conv2d_grad_weight(xp, gout, kh, kw, stride):
    # gw[co, ci, ky, kx] = sum over (sample, oy, ox) of gout * shifted input.
    # 8 partial-sum lanes, combined in a fixed order at the end.
    n, cin, hp, wp = xp.shape
    cout = gout.shape[1]
    ho = gout.shape[2]
    wo = gout.shape[3]
    gw = np.empty((cout, cin, kh, kw), xp.dtype)
    nfull = (wo // 8) * 8
    for t in prange(cout * cin):
        co = t // cin
        ci = t % cin
        lanes = np.empty(8, xp.dtype)
        for ky in range(kh):
            for kx in range(kw):
                for l in range(8):
                    lanes[l] = 0.0
                tail = xp.dtype.type(0.0)
                for i in range(n):
                    for oy in range(ho):
                        grow = gout[i, co, oy]
                        xrow = xp[i, ci, oy * stride + ky]
                        if stride == 1:
                            for base in range(0, nfull, 8):
                                for l in range(8):
                                    lanes[l] += grow[base + l] * xrow[base + l + kx]
                            for ox in range(nfull, wo):
                                tail += grow[ox] * xrow[ox + kx]
                        else:
                            for base in range(0, nfull, 8):
                                for l in range(8):
                                    lanes[l] += grow[base + l] * xrow[(base + l) * stride + kx]
                            for ox in range(nfull, wo):
                                tail += grow[ox] * xrow[ox * stride + kx]
                s = lanes[0]
                for l in range(1, 8):
                    s += lanes[l]
                gw[co, ci, ky, kx] = s + tail
    return gw


@njit(**_JIT)
def tconv2d_scatter(src, w, stride, hp, wp):
    # Adjoint of conv2d_padded: scatter src back into padded input space.
    # src: (n, p, ho, wo); w: (p, q, kh, kw) -> out: (n, q, hp, wp)
    n, np_, ho, wo = src.shape
    q = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    out = np.zeros((n, q, hp, wp), src.dtype)
    for t in prange(n * q):
        i = t // q
        qi = t % q
        for p in range(np_):
            for oy in range(ho):
                srow = src[i, p, oy]
                for ky in range(kh):
                    orow = out[i, qi, oy * stride + ky]
                    for kx in range(kw):
                        wv = w[p, qi, ky, kx]
                        if stride == 1:
                            for ox in range(wo):
                                orow[ox + kx] += wv * srow[ox]
                        else:
                            for ox in range(wo):
                                orow[ox * stride + kx] += wv * srow[ox]
    return out


@njit(**_JIT)
def maxpool2x2(x):
    # Disjoint 2x2 windows; switch = argmax flat index, ties -> lowest.
    n, c, h, w = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((n, c, ho, wo), x.dtype)
    sw = np.empty((n, c, ho, wo), np.uint8)
    for t in prange(n * c):
        i = t // c
        ci = t % c
        for oy in range(ho):
            for ox in range(wo):
                y0 = 2 * oy
                x0 = 2 * ox
                best = x[i, ci, y0, x0]
                idx = np.uint8(0)
                v = x[i, ci, y0, x0 + 1]
                if v > best:
                    best = v
                    idx = np.uint8(1)
                v = x[i, ci, y0 + 1, x0]
                if v > best:
                    best = v
                    idx = np.uint8(2)
                v = x[i, ci, y0 + 1, x0 + 1]
                if v > best:
                    best = v
                    idx = np.uint8(3)
                out[i, ci, oy, ox] = best
                sw[i, ci, oy, ox] = idx
    return out, sw


@njit(**_JIT)
def unpool2x2(y, sw):
    # Place each value at its recorded switch position, zeros elsewhere.
    n, c, ho, wo = y.shape
    out = np.zeros((n, c, ho * 2, wo * 2), y.dtype)
    for t in prange(n * c):
        i = t // c
        ci = t % c
        for oy in range(ho):
            for ox in range(wo):
                idx = sw[i, ci, oy, ox]
                out[i, ci, 2 * oy + idx // 2, 2 * ox + idx % 2] = y[i, ci, oy, ox]
    return out


@njit(**_JIT)
def unpool2x2_gather(g, sw):
    # Adjoint of unpool2x2: gather gradient values at switch positions.
    n, c, h2, w2 = g.shape
    ho = h2 // 2
    wo = w2 // 2
    out = np.empty((n, c, ho, wo), g.dtype)
    for t in prange(n * c):
        i = t // c
        ci = t % c
        for oy in range(ho):
            for ox in range(wo):
                idx = sw[i, ci, oy, ox]
                out[i, ci, oy, ox] = g[i, ci, 2 * oy + idx // 2, 2 * ox + idx % 2]
    return out


@njit(**_JIT)
def avgpool_win(xp, win):
    # Valid-mode windowed mean on a zero-padded input, full-window divisor.
    n, c, hp, wp = xp.shape
    ho = hp - win + 1
    wo = wp - win + 1
    area = xp.dtype.type(win * win)
    out = np.empty((n, c, ho, wo), xp.dtype)
    for t in prange(n * c):
        i = t // c
        ci = t % c
        acc = np.empty(wo, xp.dtype)
        for oy in range(ho):
            for ox in range(wo):
                acc[ox] = 0.0
            for ky in range(win):
                xrow = xp[i, ci, oy + ky]
                for kx in range(win):
                    for ox in range(wo):
                        acc[ox] += xrow[ox + kx]
            for ox in range(wo):
                out[i, ci, oy, ox] = acc[ox] / area
    return out


@njit(**_JIT)
def dct8_roundtrip(plane, qstep, basis):
    # Per 8x8 block: level shift, orthonormal DCT-II, uniform quantize
    # (round half to even), inverse transform, clamp to [0, 255].
    h, w = plane.shape
    nby = h // 8
    nbx = w // 8
    out = np.empty((h, w), np.float64)
    for t in prange(nby * nbx):
        by = t // nbx
        bx = t % nbx
        y0 = by * 8
        x0 = bx * 8
        blk = np.empty((8, 8), np.float64)
        tmp = np.empty((8, 8), np.float64)
        coef = np.empty((8, 8), np.float64)
        for y in range(8):
            for x in range(8):
                blk[y, x] = plane[y0 + y, x0 + x] - 128.0
        # coef = basis @ blk @ basis.T
        for u in range(8):
            for x in range(8):
                s = 0.0
                for y in range(8):
                    s += basis[u, y] * blk[y, x]
                tmp[u, x] = s
        for u in range(8):
            for v in range(8):
                s = 0.0
                for x in range(8):
                    s += tmp[u, x] * basis[v, x]
                coef[u, v] = np.rint(s / qstep) * qstep
        # blk = basis.T @ coef @ basis
        for y in range(8):
            for v in range(8):
                s = 0.0
                for u in range(8):
                    s += basis[u, y] * coef[u, v]
                tmp[y, v] = s
        for y in range(8):
            for x in range(8):
                s = 0.0
                for v in range(8):
                    s += tmp[y, v] * basis[v, x]
                v8 = s + 128.0
                if v8 < 0.0:
                    v8 = 0.0
                elif v8 > 255.0:
                    v8 = 255.0
                out[y0 + y, x0 + x] = v8
    return out

"""Pure-numpy fallback kernels.

Same signatures and semantics as the numba set. Convolution routes through
im2col + BLAS matmul, so its floating-point reduction order is the GEMM's
rather than the channel-major loop order; results stay deterministic per
run and agree with the loop oracle well inside test tolerances. Pooling,
scatter/gather and the codec transform are exact data movement and match
the numba backend bit for bit.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    v = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return v.reshape(n, c * kh * kw, ho * wo), ho, wo


def conv2d_padded(xp, w, b, stride):
    cout = w.shape[0]
    cols, ho, wo = _im2col(xp, w.shape[2], w.shape[3], stride)
    out = np.matmul(w.reshape(cout, -1)[None], cols)
    out += b[None, :, None]
    return out.reshape(xp.shape[0], cout, ho, wo)


def conv2d_grad_weight(xp, gout, kh, kw, stride):
    cout = gout.shape[1]
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    gmat = gout.reshape(gout.shape[0], cout, ho * wo)
    gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(cout, xp.shape[1], kh, kw)


def tconv2d_scatter(src, w, stride, hp, wp):
    n, p, ho, wo = src.shape
    q, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    smat = src.reshape(n, p, ho * wo)
    cols = np.matmul(w.reshape(p, q * kh * kw).T[None], smat)
    cols = cols.reshape(n, q, kh, kw, ho, wo)
    out = np.zeros((n, q, hp, wp), src.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += cols[
                :, :, ky, kx
            ]
    return out


def maxpool2x2(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    sw = flat.argmax(axis=-1).astype(np.uint8)  # first max -> lowest flat index
    out = np.take_along_axis(flat, sw[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), sw


def unpool2x2(y, sw):
    n, c, ho, wo = y.shape
    flat = np.zeros((n, c, ho, wo, 4), y.dtype)
    np.put_along_axis(flat, sw[..., None].astype(np.intp), y[..., None], axis=-1)
    win = flat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, ho * 2, wo * 2))


def unpool2x2_gather(g, sw):
    n, c, h2, w2 = g.shape
    win = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h2 // 2, w2 // 2, 4)
    out = np.take_along_axis(flat, sw[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out)


def avgpool_win(xp, win):
    n, c, hp, wp = xp.shape
    ho = hp - win + 1
    wo = wp - win + 1
    acc = np.zeros((n, c, ho, wo), xp.dtype)
    for ky in range(win):
        for kx in range(win):
            acc += xp[:, :, ky : ky + ho, kx : kx + wo]
    return acc / xp.dtype.type(win * win)


def dct8_roundtrip(plane, qstep, basis):
    h, w = plane.shape
    blocks = plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).astype(np.float64)
    blocks = blocks - 128.0
    coef = basis @ blocks @ basis.T
    coef = np.rint(coef / qstep) * qstep
    rec = basis.T @ coef @ basis + 128.0
    np.clip(rec, 0.0, 255.0, out=rec)
    return np.ascontiguousarray(rec.transpose(0, 2, 1, 3).reshape(h, w))

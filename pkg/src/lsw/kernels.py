"""Hot loops behind conv3d and maxpool3d.

Each kernel has a numpy implementation and a numba one with identical
results (same summation order, same tie-breaking). ``LSW_BACKEND`` picks
which is exported; both stay importable for benchmarking and tests.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lsw._backend import BACKEND, HAVE_NUMBA

__all__ = ["im2col", "col2im", "maxpool_forward", "maxpool_backward", "BACKEND"]


# ---------------------------------------------------------------- numpy path


def im2col_numpy(xp, kernel, stride, out_shape):
    """Gather convolution windows of a padded [N,C,D,H,W] array.

    Returns a float64 array [N, Do*Ho*Wo, C*kd*kh*kw]; the column order
    matches ``weight.reshape(F, -1)``.
    """
    n, c = xp.shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_shape
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : (do - 1) * sd + 1 : sd, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    cols = np.empty((n, do, ho, wo, c, kd, kh, kw), dtype=np.float64)
    cols[...] = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return cols.reshape(n, do * ho * wo, c * kd * kh * kw)


def col2im_numpy(dcols, xp_shape, kernel, stride, out_shape):
    """Scatter-add column gradients back onto the padded input grid."""
    n, c = xp_shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_shape
    dc = dcols.reshape(n, do, ho, wo, c, kd, kh, kw)
    dxp = np.zeros(xp_shape, dtype=np.float64)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                dxp[
                    :,
                    :,
                    a : a + (do - 1) * sd + 1 : sd,
                    b : b + (ho - 1) * sh + 1 : sh,
                    e : e + (wo - 1) * sw + 1 : sw,
                ] += dc[..., a, b, e].transpose(0, 4, 1, 2, 3)
    return dxp


def maxpool_forward_numpy(x, window, stride, out_shape):
    """Max over each window; also returns the flat argmax index per output.

    Ties resolve to the lowest linear index.
    """
    n, c, d, h, w = x.shape
    wd, wh, ww = window
    sd, sh, sw = stride
    do, ho, wo = out_shape
    win = sliding_window_view(x, (wd, wh, ww), axis=(2, 3, 4))
    win = win[:, :, : (do - 1) * sd + 1 : sd, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    flat = win.reshape(n, c, do, ho, wo, wd * wh * ww)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    la, rem = np.divmod(local, wh * ww)
    lb, le = np.divmod(rem, ww)
    od = np.arange(do).reshape(do, 1, 1) * sd
    oh = np.arange(ho).reshape(1, ho, 1) * sh
    ow = np.arange(wo).reshape(1, 1, wo) * sw
    argidx = ((od + la) * h + (oh + lb)) * w + (ow + le)
    return np.ascontiguousarray(out), argidx.astype(np.int64)


def maxpool_backward_numpy(grad_out, argidx, in_shape):
    n, c = in_shape[:2]
    spatial = in_shape[2] * in_shape[3] * in_shape[4]
    dx = np.zeros((n * c, spatial), dtype=grad_out.dtype)
    rows = np.arange(n * c).reshape(-1, 1)
    np.add.at(dx, (rows, argidx.reshape(n * c, -1)), grad_out.reshape(n * c, -1))
    return dx.reshape(in_shape)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _im2col_nb(xp, kd, kh, kw, sd, sh, sw, do, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, do * ho * wo, c * kd * kh * kw), dtype=np.float64)
        for i in range(n):
            p = 0
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        q = 0
                        for ch in range(c):
                            for a in range(kd):
                                for b in range(kh):
                                    for e in range(kw):
                                        cols[i, p, q] = xp[i, ch, od * sd + a, oh * sh + b, ow * sw + e]
                                        q += 1
                        p += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(dcols, dxp, kd, kh, kw, sd, sh, sw, do, ho, wo):
        n, c = dxp.shape[0], dxp.shape[1]
        ksz = kd * kh * kw
        # kernel offsets outermost: same accumulation order as the numpy path
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    koff = (a * kh + b) * kw + e
                    for i in range(n):
                        for ch in range(c):
                            q = ch * ksz + koff
                            p = 0
                            for od in range(do):
                                for oh in range(ho):
                                    for ow in range(wo):
                                        dxp[i, ch, od * sd + a, oh * sh + b, ow * sw + e] += dcols[i, p, q]
                                        p += 1
        return dxp

    @njit(cache=True)
    def _maxpool_fwd_nb(x, wd, wh, ww, sd, sh, sw, do, ho, wo):
        n, c, d, h, w = x.shape
        out = np.empty((n, c, do, ho, wo), dtype=x.dtype)
        arg = np.empty((n, c, do, ho, wo), dtype=np.int64)
        for i in range(n):
            for ch in range(c):
                for od in range(do):
                    for oh in range(ho):
                        for ow in range(wo):
                            d0, h0, w0 = od * sd, oh * sh, ow * sw
                            best = x[i, ch, d0, h0, w0]
                            bidx = (d0 * h + h0) * w + w0
                            for a in range(wd):
                                for b in range(wh):
                                    for e in range(ww):
                                        v = x[i, ch, d0 + a, h0 + b, w0 + e]
                                        if v > best:
                                            best = v
                                            bidx = ((d0 + a) * h + h0 + b) * w + w0 + e
                            out[i, ch, od, oh, ow] = best
                            arg[i, ch, od, oh, ow] = bidx
        return out, arg

    @njit(cache=True)
    def _maxpool_bwd_nb(grad_out, argidx, dx):
        n, c = grad_out.shape[0], grad_out.shape[1]
        g = grad_out.reshape(n, c, -1)
        a = argidx.reshape(n, c, -1)
        for i in range(n):
            for ch in range(c):
                for k in range(g.shape[2]):
                    dx[i, ch, a[i, ch, k]] += g[i, ch, k]
        return dx

    def im2col_numba(xp, kernel, stride, out_shape):
        return _im2col_nb(np.ascontiguousarray(xp), *kernel, *stride, *out_shape)

    def col2im_numba(dcols, xp_shape, kernel, stride, out_shape):
        dxp = np.zeros(xp_shape, dtype=np.float64)
        return _col2im_nb(np.ascontiguousarray(dcols), dxp, *kernel, *stride, *out_shape)

    def maxpool_forward_numba(x, window, stride, out_shape):
        return _maxpool_fwd_nb(np.ascontiguousarray(x), *window, *stride, *out_shape)

    def maxpool_backward_numba(grad_out, argidx, in_shape):
        n, c = in_shape[:2]
        dx = np.zeros((n, c, in_shape[2] * in_shape[3] * in_shape[4]), dtype=grad_out.dtype)
        _maxpool_bwd_nb(np.ascontiguousarray(grad_out), np.ascontiguousarray(argidx), dx)
        return dx.reshape(in_shape)


if BACKEND == "numba":
    im2col = im2col_numba
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy

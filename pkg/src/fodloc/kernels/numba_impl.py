"""Numba-compiled convolution kernels (NCHW layout, stride 1).

Convolutions use edge-replicate padding (better-behaved reconstructions at
patch borders than zero padding).  Inputs are padded up front so every inner
loop runs the full row width with no boundary branches; rows are contiguous,
which lets LLVM emit SIMD code.  Each output element is written by exactly
one ``prange`` task, so results are deterministic regardless of thread
count.
"""

import numpy as np
from numba import njit, prange

from .numpy_impl import fold_padding_ring


@njit(cache=True, fastmath=True, parallel=True)
def _pad_edge(x, ph, pw):
    n, c, h, w = x.shape
    out = np.empty((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    for i in prange(n):
        for j in range(c):
            for y in range(h + 2 * ph):
                ysrc = min(max(y - ph, 0), h - 1)
                row = out[i, j, y]
                xrow = x[i, j, ysrc]
                for xx in range(pw):
                    row[xx] = xrow[0]
                for xx in range(w):
                    row[xx + pw] = xrow[xx]
                for xx in range(pw):
                    row[w + pw + xx] = xrow[w - 1]
    return out


@njit(cache=True, fastmath=True, parallel=True)
def _pad_zero(x, ph, pw):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    for i in prange(n):
        out[i, :, ph:ph + h, pw:pw + w] = x[i]
    return out


@njit(cache=True, fastmath=True, parallel=True)
def _conv2d_forward(xp, w, b, h, wd):
    n_img = xp.shape[0]
    c_out, c_in, kh, kw = w.shape
    out = np.empty((n_img, c_out, h, wd), dtype=xp.dtype)
    for nf in prange(n_img * c_out):
        n = nf // c_out
        f = nf % c_out
        acc = np.empty((h, wd), dtype=xp.dtype)
        acc[:, :] = b[f]
        for c in range(c_in):
            xim = xp[n, c]
            for y in range(h):
                arow = acc[y]
                for ky in range(kh):
                    xrow = xim[y + ky]
                    for kx in range(kw):
                        wgt = w[f, c, ky, kx]
                        for i in range(wd):
                            arow[i] += wgt * xrow[i + kx]
        out[n, f] = acc
    return out


def conv2d_forward(x, w, b):
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad_edge(x, kh // 2, kw // 2)
    return _conv2d_forward(xp, w, b, x.shape[2], x.shape[3])


@njit(cache=True, fastmath=True, parallel=True)
def _conv2d_input_grad(dyp, w, h, wd):
    n_img = dyp.shape[0]
    c_out, c_in, kh, kw = w.shape
    dx = np.empty((n_img, c_in, h, wd), dtype=dyp.dtype)
    for nc in prange(n_img * c_in):
        n = nc // c_in
        c = nc % c_in
        acc = np.zeros((h, wd), dtype=dyp.dtype)
        for f in range(c_out):
            dyim = dyp[n, f]
            for y in range(h):
                arow = acc[y]
                for ky in range(kh):
                    dyrow = dyim[y + ky]
                    for kx in range(kw):
                        # correlation with the flipped kernel
                        wgt = w[f, c, kh - 1 - ky, kw - 1 - kx]
                        for i in range(wd):
                            arow[i] += wgt * dyrow[i + kx]
        dx[n, c] = acc
    return dx


def conv2d_input_grad(dy, w):
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    # gradient over the padded grid, then fold the replicate-padding ring
    dyp = _pad_zero(dy, 2 * ph, 2 * pw)
    dxpad = _conv2d_input_grad(dyp, w, dy.shape[2] + 2 * ph, dy.shape[3] + 2 * pw)
    return fold_padding_ring(dxpad, ph)


@njit(cache=True, fastmath=True, parallel=True)
def _conv2d_weight_grad(xp, dy, kh, kw):
    n_img, c_out, h, wd = dy.shape
    c_in = xp.shape[1]
    dw = np.empty((c_out, c_in, kh, kw), dtype=xp.dtype)
    for fc in prange(c_out * c_in):
        f = fc // c_in
        c = fc % c_in
        acc = np.zeros((kh, kw), dtype=xp.dtype)
        for n in range(n_img):
            xim = xp[n, c]
            dyim = dy[n, f]
            for y in range(h):
                dyrow = dyim[y]
                for ky in range(kh):
                    xrow = xim[y + ky]
                    for kx in range(kw):
                        s = 0.0
                        for i in range(wd):
                            s += dyrow[i] * xrow[i + kx]
                        acc[ky, kx] += s
        dw[f, c] = acc
    return dw


def conv2d_weight_grad(x, dy, kh, kw):
    xp = _pad_edge(x, kh // 2, kw // 2)
    return _conv2d_weight_grad(xp, dy, kh, kw)

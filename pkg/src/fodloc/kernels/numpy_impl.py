"""Pure numpy fallback for the convolution kernels (im2col + matmul).

Convolutions use edge-replicate padding: reconstruction networks behave
much better at patch borders than with zero padding, and the texture there
matters because Otsu sees every pixel.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _cols(x, kh, kw):
    # (N, C, H, W) padded -> (N, H, W, C, kh, kw) view over sliding windows
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v.transpose(0, 2, 3, 1, 4, 5)


def fold_padding_ring(dxpad, p):
    """Adjoint of edge-replicate padding: accumulate the gradient of the
    padding ring back onto the border pixels."""
    if p == 0:
        return dxpad
    dx = dxpad[:, :, p:-p, p:-p].copy()
    for k in range(p):
        dx[:, :, 0, :] += dxpad[:, :, k, p:-p]
        dx[:, :, -1, :] += dxpad[:, :, -(k + 1), p:-p]
        dx[:, :, :, 0] += dxpad[:, :, p:-p, k]
        dx[:, :, :, -1] += dxpad[:, :, p:-p, -(k + 1)]
    corners = dxpad[:, :, :p, :p].sum(axis=(2, 3))
    dx[:, :, 0, 0] += corners
    dx[:, :, 0, -1] += dxpad[:, :, :p, -p:].sum(axis=(2, 3))
    dx[:, :, -1, 0] += dxpad[:, :, -p:, :p].sum(axis=(2, 3))
    dx[:, :, -1, -1] += dxpad[:, :, -p:, -p:].sum(axis=(2, 3))
    return dx


def conv2d_forward(x, w, b):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="edge")
    cols = _cols(xp, kh, kw).reshape(n * h * wd, -1)
    out = cols @ w.reshape(c_out, -1).T + b
    return np.ascontiguousarray(out.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2))


def conv2d_input_grad(dy, w):
    n, c_out, h, wd = dy.shape
    _, c_in, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    # full correlation with the flipped kernel over the padded grid, then
    # fold the ring (adjoint of the replicate padding)
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dyp = np.pad(dy, ((0, 0), (0, 0), (2 * ph, 2 * ph), (2 * pw, 2 * pw)))
    cols = _cols(dyp, kh, kw).reshape(n * (h + 2 * ph) * (wd + 2 * pw), -1)
    dxpad = cols @ w_flip.reshape(c_in, -1).T
    dxpad = np.ascontiguousarray(
        dxpad.reshape(n, h + 2 * ph, wd + 2 * pw, c_in).transpose(0, 3, 1, 2)
    )
    return fold_padding_ring(dxpad, ph)


def conv2d_weight_grad(x, dy, kh, kw):
    n, c_in, h, wd = x.shape
    c_out = dy.shape[1]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="edge")
    cols = _cols(xp, kh, kw).reshape(n * h * wd, -1)
    dyf = dy.transpose(0, 2, 3, 1).reshape(n * h * wd, c_out)
    return (dyf.T @ cols).reshape(c_out, c_in, kh, kw)

"""Individual network layers with explicit forward/backward passes.

Convolutions dispatch to the selected kernel backend; everything else is
plain vectorized numpy.  Feature maps use NCHW layout, token tensors (B,T,D).
"""

import numpy as np

from .. import kernels
from ..errors import DimensionError
from .core import Module


def _as_c(x):
    return np.ascontiguousarray(x)


class Conv2d(Module):
    """Same-padding, stride-1 convolution."""

    def __init__(self, in_channels, out_channels, rng, kernel_size=3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        std = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        self.params["w"] = (
            rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * std
        ).astype(np.float32)
        self.params["b"] = np.zeros(out_channels, dtype=np.float32)
        self._x = None

    def forward(self, x, training=False):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        self._x = _as_c(x)
        return kernels.conv2d_forward(self._x, self.params["w"], self.params["b"])

    def backward(self, dy):
        dy = _as_c(dy)
        k = self.kernel_size
        self.grads["w"] = kernels.conv2d_weight_grad(self._x, dy, k, k)
        self.grads["b"] = dy.sum(axis=(0, 2, 3))
        return kernels.conv2d_input_grad(dy, self.params["w"])


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)
        self._cache = None

    def forward(self, x, training=False):
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        beta = self.params["beta"].reshape(1, -1, 1, 1)
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.buffers["running_mean"] = (
                (1 - m) * self.buffers["running_mean"] + m * mean
            ).astype(x.dtype)
            self.buffers["running_var"] = (
                (1 - m) * self.buffers["running_var"] + m * var
            ).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"].astype(x.dtype)
            var = self.buffers["running_var"].astype(x.dtype)
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * invstd.reshape(1, -1, 1, 1)
        self._cache = (xhat, invstd, training)
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, invstd, was_training = self._cache
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        self.grads["gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma
        if not was_training:
            return dxhat * invstd.reshape(1, -1, 1, 1)
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (invstd.reshape(1, -1, 1, 1) / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy):
        return np.where(self._mask, dy, dy.dtype.type(0))


class MaxPool2d(Module):
    """2x2 max pooling, stride 2.  Ties resolve to the first window slot."""

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"pooling needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, (n, c, h, w))
        return out

    def backward(self, dy):
        idx, (n, c, h, w) = self._cache
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(n, c, h, w)


class UpsampleNearest2x(Module):
    def __init__(self):
        super().__init__()

    def forward(self, x, training=False):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        n, c, h, w = dy.shape
        return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class Sigmoid(Module):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x, training=False):
        pos = x >= 0
        e = np.exp(np.where(pos, -x, x))
        self._y = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class Linear(Module):
    """Affine map over the last axis; works on (..., d_in) tensors."""

    def __init__(self, d_in, d_out, rng, init="he"):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        if init == "he":
            std = np.sqrt(2.0 / d_in)
        elif init == "xavier":
            std = np.sqrt(1.0 / d_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params["w"] = (rng.standard_normal((d_in, d_out)) * std).astype(np.float32)
        self.params["b"] = np.zeros(d_out, dtype=np.float32)
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.grads["w"] = x2.T @ dy2
        self.grads["b"] = dy2.sum(axis=0)
        return dy @ self.params["w"].T


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.params["gamma"] = np.ones(dim, dtype=np.float32)
        self.params["beta"] = np.zeros(dim, dtype=np.float32)
        self._cache = None

    def forward(self, x, training=False):
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * invstd
        self._cache = (xhat, invstd)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy):
        xhat, invstd = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"]
        d = dy.shape[-1]
        s1 = dxhat.mean(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return invstd * (dxhat - s1 - xhat * s2)


_GELU_C = np.sqrt(2.0 / np.pi)


class GELU(Module):
    """Tanh-approximated GELU."""

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, training=False):
        u = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(u)
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dy):
        x, t = self._cache
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


class GlobalAvgPool2d(Module):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None], self._shape) / (h * w)

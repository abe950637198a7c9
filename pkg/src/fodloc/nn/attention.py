"""Multi-head self-attention and the transformer block used by the ViT layer."""

import numpy as np

from .core import Module
from .layers import GELU, LayerNorm, Linear


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        for name in ("wq", "wk", "wv", "wo"):
            self.add(name, Linear(dim, dim, rng, init="xavier"))
        self._cache = None

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)

    def forward(self, x, training=False):
        q = self._split(self._modules["wq"].forward(x, training))
        k = self._split(self._modules["wk"].forward(x, training))
        v = self._split(self._modules["wv"].forward(x, training))
        attn = _softmax(q @ k.transpose(0, 1, 3, 2) * self.scale)
        ctx = attn @ v
        self._cache = (q, k, v, attn)
        return self._modules["wo"].forward(self._merge(ctx), training)

    def backward(self, dy):
        q, k, v, attn = self._cache
        dctx = self._split(self._modules["wo"].backward(dy))
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        # softmax jacobian-vector product, row-wise
        dscore = (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * attn
        dscore *= self.scale
        dq = dscore @ k
        dk = dscore.transpose(0, 1, 3, 2) @ q
        dx = self._modules["wq"].backward(self._merge(dq))
        dx = dx + self._modules["wk"].backward(self._merge(dk))
        dx = dx + self._modules["wv"].backward(self._merge(dv))
        return dx


class TransformerBlock(Module):
    """Pre-norm transformer encoder block (attention + MLP, residual adds)."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        super().__init__()
        self.add("ln1", LayerNorm(dim))
        self.add("attn", MultiHeadSelfAttention(dim, heads, rng))
        self.add("ln2", LayerNorm(dim))
        hidden = int(dim * mlp_ratio)
        self.add("fc1", Linear(dim, hidden, rng))
        self.add("gelu", GELU())
        self.add("fc2", Linear(hidden, dim, rng))

    def forward(self, x, training=False):
        m = self._modules
        x = x + m["attn"].forward(m["ln1"].forward(x, training), training)
        h = m["fc1"].forward(m["ln2"].forward(x, training), training)
        return x + m["fc2"].forward(m["gelu"].forward(h, training), training)

    def backward(self, dy):
        m = self._modules
        dh = m["gelu"].backward(m["fc2"].backward(dy))
        dx = dy + m["ln2"].backward(m["fc1"].backward(dh))
        da = m["attn"].backward(dx)
        return dx + m["ln1"].backward(da)

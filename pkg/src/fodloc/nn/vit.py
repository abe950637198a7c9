"""Vision-transformer layer operating as a drop-in spatial feature mapper.

Tokenizes a feature map into non-overlapping square tiles, embeds the tokens
with learned position offsets, runs a stack of transformer blocks, projects
tokens back to pixels and reassembles the map.  There is no class token and
no classification head, so spatial shape is preserved (channels may change).
"""

import numpy as np

from ..errors import ConfigError
from .attention import TransformerBlock
from .core import Module
from .layers import Linear


class ViTLayer(Module):
    def __init__(self, in_channels, out_channels, height, width, token_patch,
                 embed_dim, heads, transformer_depth, rng):
        super().__init__()
        if height % token_patch or width % token_patch:
            raise ConfigError(
                f"feature map {height}x{width} not divisible by token_patch {token_patch}"
            )
        if embed_dim % heads:
            raise ConfigError("embed_dim must be divisible by heads")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.height = height
        self.width = width
        self.p = token_patch
        self.tokens_h = height // token_patch
        self.tokens_w = width // token_patch
        n_tokens = self.tokens_h * self.tokens_w
        self.add("embed", Linear(in_channels * token_patch**2, embed_dim, rng, init="xavier"))
        self.params["pos"] = (
            rng.standard_normal((n_tokens, embed_dim)) * 0.02
        ).astype(np.float32)
        for i in range(transformer_depth):
            self.add(f"block{i}", TransformerBlock(embed_dim, heads, rng))
        self.n_blocks = transformer_depth
        self.add("proj", Linear(embed_dim, out_channels * token_patch**2, rng, init="xavier"))

    def _tokenize(self, x):
        n, c, h, w = x.shape
        p, th, tw = self.p, self.tokens_h, self.tokens_w
        t = x.reshape(n, c, th, p, tw, p).transpose(0, 2, 4, 1, 3, 5)
        return t.reshape(n, th * tw, c * p * p)

    def _untokenize(self, t, channels):
        n = t.shape[0]
        p, th, tw = self.p, self.tokens_h, self.tokens_w
        x = t.reshape(n, th, tw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(n, channels, th * p, tw * p)

    def forward(self, x, training=False):
        if x.shape[2] != self.height or x.shape[3] != self.width:
            raise ConfigError(
                f"ViT layer built for {self.height}x{self.width}, got {x.shape[2]}x{x.shape[3]}"
            )
        t = self._modules["embed"].forward(self._tokenize(x), training)
        t = t + self.params["pos"]
        for i in range(self.n_blocks):
            t = self._modules[f"block{i}"].forward(t, training)
        out = self._modules["proj"].forward(t, training)
        return np.ascontiguousarray(self._untokenize(out, self.out_channels))

    def backward(self, dy):
        dt = self._tokenize(dy)
        dt = self._modules["proj"].backward(dt)
        for i in reversed(range(self.n_blocks)):
            dt = self._modules[f"block{i}"].backward(dt)
        self.grads["pos"] = dt.sum(axis=0)
        dtok = self._modules["embed"].backward(dt)
        return np.ascontiguousarray(self._untokenize(dtok, self.in_channels))

"""Minimal layer/module machinery for the hand-rolled networks.

A ``Module`` owns its parameters (``params``), their gradients (``grads``),
non-trainable state (``buffers``) and child modules (``_modules``).  Forward
passes cache whatever the matching backward pass needs; each module instance
is therefore used at most once per forward graph.
"""

import numpy as np


class Module:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._modules = {}

    # -- graph traversal ---------------------------------------------------
    def add(self, name, module):
        self._modules[name] = module
        return module

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for k in self.params:
            yield prefix + k, self.grads.get(k)
        for name, m in self._modules.items():
            yield from m.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def zero_grad(self):
        for k in self.params:
            self.grads[k] = None
        for m in self._modules.values():
            m.zero_grad()

    # -- state manipulation --------------------------------------------------
    def set_parameter(self, name, value):
        head, _, rest = name.partition(".")
        if rest:
            self._modules[head].set_parameter(rest, value)
        else:
            if name not in self.params:
                raise KeyError(name)
            self.params[name] = value

    def set_buffer(self, name, value):
        head, _, rest = name.partition(".")
        if rest:
            self._modules[head].set_buffer(rest, value)
        else:
            if name not in self.buffers:
                raise KeyError(name)
            self.buffers[name] = value

    def state_dict(self):
        state = {f"param/{k}": v for k, v in self.named_parameters()}
        state.update({f"buffer/{k}": v for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        for key, value in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                self.set_parameter(name, np.array(value))
            elif kind == "buffer":
                self.set_buffer(name, np.array(value))
            else:
                raise KeyError(key)

    def astype(self, dtype):
        """Cast parameters and buffers in place (returns self)."""
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        for m in self._modules.values():
            m.astype(dtype)
        return self

    # -- interface -----------------------------------------------------------
    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, training=False):
        return self.forward(x, training=training)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    @property
    def layers(self):
        return list(self._modules.values())

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

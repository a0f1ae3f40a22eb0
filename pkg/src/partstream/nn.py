"""Minimal module tree, standard layers, and SGD with momentum."""

import numpy as np

from .tensor import (
    Parameter, ConfigError, batch_norm_2d, conv2d, matmul, pointwise_conv,
    reshape,
)

__all__ = [
    "Module", "ModuleList", "PointwiseConv", "TemporalConv", "BatchNorm2d",
    "Linear", "SGD",
]


class Module:
    """Base class tracking parameters, buffers and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, array):
        self._buffers[key] = array
        object.__setattr__(self, key, array)

    def named_parameters(self, prefix=""):
        for key, p in self._params.items():
            p.name = f"{prefix}{key}"
            yield p.name, p
        for key, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, b in self._buffers.items():
            yield f"{prefix}{key}", b
        for key, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, flag=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self):
        """Name -> array copy of every parameter and buffer (checkpoint payload)."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_arrays(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = state[name].astype(p.data.dtype).copy()
        for name, b in self.named_buffers():
            if name not in state:
                raise KeyError(f"missing buffer {name}")
            if state[name].shape != b.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {state[name].shape} vs {b.shape}")
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _kaiming_normal(rng, shape, fan_out, dtype):
    std = np.sqrt(2.0 / fan_out)
    return (rng.standard_normal(shape) * std).astype(dtype)


class PointwiseConv(Module):
    """1x1 convolution over the channel axis (any spatial layout)."""

    def __init__(self, cin, cout, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.weight = Parameter(_kaiming_normal(rng, (cout, cin), cout, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return pointwise_conv(x, self.weight, self.bias)

    def flops(self, positions):
        return self.cin * self.cout * positions


class TemporalConv(Module):
    """2D convolution with a (kt,1) kernel, temporal stride/dilation, same-padding."""

    def __init__(self, cin, cout, kt, rng, stride=1, dilation=1, bias=True,
                 dtype=np.float32):
        super().__init__()
        self.cin, self.cout, self.kt = cin, cout, kt
        self.stride, self.dilation = stride, dilation
        self.pad = dilation * (kt - 1) // 2
        self.weight = Parameter(
            _kaiming_normal(rng, (cout, cin, kt, 1), cout * kt, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, stride_t=self.stride,
                      dilation_t=self.dilation, pad_t=self.pad, bias=self.bias)

    def out_frames(self, t):
        span = self.dilation * (self.kt - 1) + 1
        return (t + 2 * self.pad - span) // self.stride + 1

    def flops(self, t, n):
        return self.cin * self.cout * self.kt * self.out_frames(t) * n


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return batch_norm_2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.training,
                             momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.cin, self.cout = cin, cout
        bound = 1.0 / np.sqrt(cin)
        self.weight = Parameter(rng.uniform(-bound, bound, (cin, cout)).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, cout).astype(dtype))

    def forward(self, x):
        return matmul(x, self.weight) + reshape(self.bias, (1, self.cout))

    def flops(self):
        return self.cin * self.cout


class SGD:
    """SGD with classical momentum and decoupled-from-nothing L2 weight decay.

    v <- momentum*v + (g + weight_decay*p); p <- p - lr*v. A zero learning
    rate is a no-op on parameters; negative rates are rejected.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ConfigError("duplicate parameter in optimizer list")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
            else:
                v = g
            p.data -= (self.lr * v).astype(p.data.dtype)

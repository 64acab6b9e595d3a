"""Module containers holding parameters and buffers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class; parameters, buffers and submodules register on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters then buffers of each module, in registration order."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._collect_state("", out)
        return out

    def _collect_state(self, prefix: str, out) -> None:
        for name, p in self._params.items():
            out[prefix + name] = p.data
        for name, b in self._buffers.items():
            out[prefix + name] = b
        for name, m in self._modules.items():
            m._collect_state(prefix + name + ".", out)

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into existing storage. Caller validates paths and shapes."""
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, value in state.items():
            if key in params:
                target = params[key].data
            elif key in buffers:
                target = buffers[key]
            else:
                raise KeyError(key)
            target[...] = value

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (e.g. to float64 for checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            for name in list(m._buffers):
                arr = m._buffers[name].astype(dtype)
                m._buffers[name] = arr
                object.__setattr__(m, name, arr)
        return self


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        for i, m in enumerate(modules):
            self.add_module(str(i), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def forward(self, x):
        for m in self._modules.values():
            x = m(x)
        return x


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size),
                                      dtype=np.float32), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)

    @property
    def fan_in(self) -> int:
        _, c, kh, kw = self.weight.shape
        return c * kh * kw

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalisation over channel axis 1, for 2-d or 4-d inputs."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(num_features, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(num_features, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=np.float32))
        self.register_buffer("running_var", np.ones(num_features, dtype=np.float32))

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


BatchNorm2d = BatchNorm


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = Tensor(np.zeros((out_features, in_features), dtype=np.float32),
                             requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel_size: int = 2, stride: Optional[int] = None, padding: int = 0):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.max_pool2d(x, self.kernel_size, self.stride, self.padding)


class GlobalAvgPool(Module):
    def forward(self, x):
        return F.global_avg_pool(x)


def init_uniform_fan_in(module: Module, rng: np.random.Generator) -> None:
    """Uniform(-a, a), a = sqrt(6 / fan_in), for every conv and dense weight.

    Biases are zeroed; batchnorm scale 1 and shift 0. Modules are visited in
    registration order so the draw sequence is fixed by the architecture.
    """
    for _, m in module.named_modules():
        if isinstance(m, (Conv2d, Linear)):
            a = np.sqrt(6.0 / m.fan_in)
            w = m.weight.data
            w[...] = rng.uniform(-a, a, size=w.shape).astype(w.dtype)
            if m.bias is not None:
                m.bias.data[...] = 0
        elif isinstance(m, BatchNorm):
            m.weight.data[...] = 1
            m.bias.data[...] = 0
            m.running_mean[...] = 0
            m.running_var[...] = 1

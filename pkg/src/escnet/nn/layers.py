"""Parameter containers for the layer set used by ESResNet."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


class Module:
    """Registers Tensor parameters, numpy buffers and child modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters and buffers interleaved per module, in registration order."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        self._collect_state("", out)
        return out

    def _collect_state(self, prefix: str, out: "OrderedDict[str, np.ndarray]") -> None:
        for name, p in self._params.items():
            out[prefix + name] = p.data
        for name, b in self._buffers.items():
            out[prefix + name] = b
        for name, child in self._children.items():
            child._collect_state(f"{prefix}{name}.", out)

    def load_state_dict(self, state) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"missing tensors: {', '.join(missing)}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: expected {arr.shape}, got {src.shape}")
            arr[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i: int) -> Module:
        return list(self._children.values())[i]

    def forward(self, x):
        for m in self._children.values():
            x = m(x)
        return x


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=False, *, rng):
        super().__init__()
        kh, kw = F._pair(kernel_size)
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw),
                             requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseSeparableConv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, *, rng):
        super().__init__()
        kh, kw = F._pair(kernel_size)
        self.stride = stride
        self.padding = padding
        self.depthwise = Tensor(he_normal(rng, (in_channels, 1, kh, kw), kh * kw), requires_grad=True)
        self.pointwise = Tensor(he_normal(rng, (out_channels, in_channels, 1, 1), in_channels), requires_grad=True)

    def forward(self, x):
        return F.depthwise_separable_conv2d(x, self.depthwise, self.pointwise, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dt = default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x):
        return F.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Linear(Module):
    """Fully connected layer; weight and bias start at U(-1/sqrt(in), 1/sqrt(in)) as in torch.nn.Linear."""

    def __init__(self, in_features: int, out_features: int, *, rng):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        dt = default_dtype()
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)).astype(dt), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_features).astype(dt), requires_grad=True)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel_size: int, stride: int, padding: int = 0):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.max_pool2d(x, self.kernel_size, self.stride, self.padding)

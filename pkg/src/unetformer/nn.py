"""Module system: parameter containers, common layers, initialization.

A `Module` discovers parameters, buffers, and submodules by walking its
instance attributes in insertion order, so the traversal order (and with it
checkpoint layout and init order) is fixed by construction order alone.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops, rng, tensor
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor; always created requiring gradients.

    Defaults to float32 regardless of the input dtype (use `cast_model`
    to move a whole model to float64 for numeric checks). Rank-0/1
    parameters remember their construction-time values so that
    `init_model` can restore structural constants (gates, mixing weights)
    instead of randomizing them.
    """

    def __init__(self, data, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self._init_value = self.data.copy() if self.ndim < 2 else None


class Buffer:
    """Non-trainable module state (e.g. running statistics)."""

    def __init__(self, data):
        self.data = np.asarray(data)


class Module:
    """Base class with named parameter/buffer traversal and train/eval mode."""

    def __init__(self):
        self.training = True

    # construction order == vars() order, which fixes traversal order
    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Buffer):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{full}.")

    def train(self) -> "Module":
        self.training = True
        for _, child in self._children():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for _, child in self._children():
            child.eval()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Sequential(Module):
    """Chains modules; iteration order is the argument order."""

    def __init__(self, *modules: Module):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, f"m{i}", m)
        self._count = len(modules)

    def forward(self, x: Tensor) -> Tensor:
        for i in range(self._count):
            x = getattr(self, f"m{i}")(x)
        return x


class Conv2d(Module):
    """2-D convolution layer; weight layout (out, in/groups, kh, kw)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size,
                 stride=1, padding=0, groups: int = 1, bias: bool = True):
        super().__init__()
        kh, kw = ops._pair(kernel_size)
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"channels ({in_channels}, {out_channels}) not divisible by groups {groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.stride = ops._pair(stride)
        self.padding = ops._pair(padding)
        self.groups = groups
        self.weight = Parameter(np.zeros((out_channels, in_channels // groups, kh, kw)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias,
                          stride=self.stride, padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = Buffer(np.zeros(channels, dtype=np.float64))
        self.running_var = Buffer(np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta,
                               self.running_mean.data, self.running_var.data,
                               training=self.training,
                               momentum=self.momentum, eps=self.eps)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return tensor.relu(x)


class ReLU6(Module):
    def forward(self, x: Tensor) -> Tensor:
        return tensor.relu6(x)


class ConvBN(Module):
    """Convolution followed by batch norm; the conv carries no bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size,
                 stride=1, padding=0, groups: int = 1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size,
                           stride=stride, padding=padding, groups=groups, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class ConvBNReLU(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size,
                 stride=1, padding=0, groups: int = 1):
        super().__init__()
        self.block = ConvBN(in_channels, out_channels, kernel_size,
                            stride=stride, padding=padding, groups=groups)

    def forward(self, x: Tensor) -> Tensor:
        return tensor.relu(self.block(x))


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 2:
        return shape[1]
    return shape[0]


def init_model(model: Module, seed: int) -> Module:
    """Initialize every parameter from its own named random stream.

    Weight tensors (rank >= 2) use Kaiming-uniform over fan-in, bound
    sqrt(6/fan_in). Batch-norm scales reset to one, biases and offsets to
    zero, and any other low-rank parameter returns to its construction-time
    value. Because each weight draws from a stream keyed by its fully
    qualified name, adding or removing one parameter never shifts the
    initial values of the others.
    """
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            p.data[...] = 1.0
        elif leaf.endswith("bias") or leaf == "beta":
            p.data[...] = 0.0
        elif p.ndim < 2:
            p.data[...] = p._init_value
        else:
            bound = math.sqrt(6.0 / _fan_in(p.shape))
            g = rng.stream(seed, f"init/{name}")
            p.data[...] = g.uniform(-bound, bound, size=p.shape).astype(p.dtype)
        p.grad = None
    return model


def cast_model(model: Module, dtype) -> Module:
    """Re-type every parameter in place (e.g. float64 for numeric checks)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"models hold float32/float64 parameters, got {dtype}")
    for _, p in model.named_parameters():
        p.data = np.asarray(p.data.astype(dtype), order="C")
        if p._init_value is not None:
            p._init_value = p._init_value.astype(dtype)
        p.grad = None
    return model

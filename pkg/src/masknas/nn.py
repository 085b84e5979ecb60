"""Layer containers on top of the autodiff primitives."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module and updated by an optimizer."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Parameter/buffer registry with train/eval switching.

    Traversal follows attribute assignment order, so parameter names and
    orderings are stable across runs.  Buffers are numpy arrays registered
    with ``register_buffer`` and are mutated in place.
    """

    training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        names = self.__dict__.setdefault("_buffer_names", [])
        names.append(name)
        setattr(self, name, value)

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.__dict__.get("_buffer_names", []):
            yield prefix + name, getattr(self, name)
        for key, child in self._children():
            yield from child.named_buffers(prefix + key + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=ad.DTYPE)
        for name, buf in self.named_buffers():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(ad.DTYPE)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel_size, stride=1, padding=0, dilation=1, groups=1,
                 bias=False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (cin // groups) * kernel_size * kernel_size
        self.weight = Parameter(kaiming_normal(rng, (cout, cin // groups, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel_size, stride=1, padding=0, bias=False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * kernel_size * kernel_size // (stride * stride)
        self.weight = Parameter(kaiming_normal(rng, (cin, cout, kernel_size, kernel_size), max(fan_in, 1)))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True, momentum: float = ad.functional.BN_MOMENTUM,
                 eps: float = ad.functional.BN_EPS):
        self.gamma = Parameter(np.ones(channels)) if affine else None
        self.beta = Parameter(np.zeros(channels)) if affine else None
        self.momentum, self.eps = momentum, eps
        self.register_buffer("running_mean", np.zeros(channels, dtype=ad.DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=ad.DTYPE))

    def forward(self, x):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(fin)
        self.weight = Parameter(rng.uniform(-bound, bound, (fout, fin)))
        self.bias = Parameter(np.zeros(fout)) if bias else None

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return ad.relu(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)


def set_requires_grad(params: Sequence[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag

"""Candidate operations for the two cell search spaces."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .. import autodiff as ad
from ..nn import BatchNorm2d, Conv2d, Module, ReLU, Sequential

DARTS_OPS = (
    "none",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)

NB201_OPS = ("none", "skip_connect", "conv_1x1", "conv_3x3", "avg_pool_3x3")

SPACES: Dict[str, Sequence[str]] = {"darts": DARTS_OPS, "nb201": NB201_OPS}


class Zero(Module):
    """The 'none' operation.  ``forward`` returns ``None`` (a structural zero)."""

    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x):
        return None

    def dense(self, x):
        b, c, h, w = x.shape
        return ad.zeros((b, c, h // self.stride, w // self.stride))


class Identity(Module):
    def forward(self, x):
        return x


class ReLUConvBN(Module):
    def __init__(self, cin, cout, k, stride, padding, affine=True, rng=None):
        self.op = Sequential(
            ReLU(),
            Conv2d(cin, cout, k, stride=stride, padding=padding, rng=rng),
            BatchNorm2d(cout, affine=affine),
        )

    def forward(self, x):
        return self.op(x)


class DilConv(Module):
    def __init__(self, cin, cout, k, stride, padding, dilation, affine=True, rng=None):
        self.op = Sequential(
            ReLU(),
            Conv2d(cin, cin, k, stride=stride, padding=padding, dilation=dilation, groups=cin, rng=rng),
            Conv2d(cin, cout, 1, rng=rng),
            BatchNorm2d(cout, affine=affine),
        )

    def forward(self, x):
        return self.op(x)


class SepConv(Module):
    """Two stacked depthwise-separable blocks; only the first may stride."""

    def __init__(self, cin, cout, k, stride, padding, affine=True, rng=None):
        self.op = Sequential(
            DilConv(cin, cin, k, stride, padding, 1, affine=affine, rng=rng),
            DilConv(cin, cout, k, 1, padding, 1, affine=affine, rng=rng),
        )

    def forward(self, x):
        return self.op(x)


class FactorizedReduce(Module):
    """Channel-preserving stride-2 reduction from two offset 1x1 convolutions."""

    def __init__(self, cin, cout, affine=True, rng=None):
        if cout % 2:
            raise ValueError("FactorizedReduce needs an even number of output channels")
        self.conv_1 = Conv2d(cin, cout // 2, 1, stride=2, rng=rng)
        self.conv_2 = Conv2d(cin, cout // 2, 1, stride=2, rng=rng)
        self.bn = BatchNorm2d(cout, affine=affine)

    def forward(self, x):
        x = ad.relu(x)
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ad.DimensionError("FactorizedReduce needs even spatial size")
        out = ad.concat([self.conv_1(x), self.conv_2(x[:, :, 1:, 1:])], axis=1)
        return self.bn(out)


class Pool(Module):
    def __init__(self, kind: str, stride: int, channels: int | None = None):
        self.kind = kind
        self.stride = stride
        # pooled outputs are renormalized inside a mixed edge, as in the searched supernet
        self.bn = BatchNorm2d(channels, affine=False) if channels is not None else None

    def forward(self, x):
        fn = ad.max_pool2d if self.kind == "max" else ad.avg_pool2d
        out = fn(x, 3, self.stride, 1)
        return self.bn(out) if self.bn is not None else out


def build_op(name: str, channels: int, stride: int, affine: bool, rng, pool_bn: bool = False) -> Module:
    c = channels
    pool_c = c if pool_bn else None
    table: Dict[str, Callable[[], Module]] = {
        "none": lambda: Zero(stride),
        "skip_connect": lambda: Identity() if stride == 1 else FactorizedReduce(c, c, affine, rng),
        "max_pool_3x3": lambda: Pool("max", stride, pool_c),
        "avg_pool_3x3": lambda: Pool("avg", stride, pool_c),
        "sep_conv_3x3": lambda: SepConv(c, c, 3, stride, 1, affine, rng),
        "sep_conv_5x5": lambda: SepConv(c, c, 5, stride, 2, affine, rng),
        "dil_conv_3x3": lambda: DilConv(c, c, 3, stride, 2, 2, affine, rng),
        "dil_conv_5x5": lambda: DilConv(c, c, 5, stride, 4, 2, affine, rng),
        "conv_1x1": lambda: ReLUConvBN(c, c, 1, stride, 0, affine, rng),
        "conv_3x3": lambda: ReLUConvBN(c, c, 3, stride, 1, affine, rng),
    }
    if name not in table:
        raise KeyError(f"unknown operation {name!r}")
    return table[name]()


def mixed_op_forward(x, edge_alpha, ops: Sequence[Module]):
    """Softmax-weighted sum of every candidate operation applied to ``x``."""
    weights = ad.softmax(ad.as_tensor(edge_alpha), axis=-1)
    return ad.weighted_sum(weights, [op(x) for op in ops])


class MixedOp(Module):
    def __init__(self, op_names: Sequence[str], channels: int, stride: int, rng):
        self.ops = [build_op(n, channels, stride, affine=False, rng=rng, pool_bn=True) for n in op_names]
        self.stride = stride

    def forward(self, x, weights):
        """``weights`` is the already-softmaxed 1-d row for this edge."""
        outs = [op(x) for op in self.ops]
        if all(o is None for o in outs):
            return ad.mul(self.ops[0].dense(x), weights.sum())
        return ad.weighted_sum(weights, outs)



"""Classification head and the convolutional reconstruction decoder."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, ReLU, Sequential
from .space.supernet import ConfigurationError


class ClassifierHead(Module):
    """Global average pooling followed by one linear layer."""

    def __init__(self, channels: int, num_classes: int, rng=None):
        self.fc = Linear(channels, num_classes, rng=rng)

    def forward(self, x_inter):
        return self.fc(ad.global_avg_pool(x_inter))


class ReconstructionDecoder(Module):
    """Decode /4 features back to an image clipped to the data range.

    Layers: 3x3 conv (spatial mixing), 1x1 conv (channel mixing), then two
    stages of [3x3 conv, batch norm, ReLU, x2 transposed conv], and a final
    3x3 conv to the image channels followed by an elementwise HardTanh.
    """

    def __init__(self, in_channels: int, image_shape: Sequence[int], lo, hi,
                 width: int = 128, rng=None):
        c, h, w = image_shape
        if h % 4 or w % 4:
            raise ConfigurationError("decoder restores a /4 feature map; image size must be divisible by 4")
        self.image_shape = (c, h, w)
        self.spatial = Conv2d(in_channels, in_channels, 3, padding=1, bias=True, rng=rng)
        self.channel = Conv2d(in_channels, width, 1, bias=True, rng=rng)
        stages = []
        cin = width
        for _ in range(2):
            cout = max(cin // 2, 1)
            stages.append(Sequential(
                Conv2d(cin, cin, 3, padding=1, rng=rng),
                BatchNorm2d(cin),
                ReLU(),
                ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=True, rng=rng),
            ))
            cin = cout
        self.stages = stages
        self.out = Conv2d(cin, c, 3, padding=1, bias=True, rng=rng)
        self.lo = np.asarray(lo, dtype=ad.DTYPE).reshape(1, -1, 1, 1)
        self.hi = np.asarray(hi, dtype=ad.DTYPE).reshape(1, -1, 1, 1)
        if np.any(self.lo >= self.hi):
            raise ConfigurationError("HardTanh bounds need lo < hi per channel")

    def pre_activation(self, x_inter):
        _, h, w = self.image_shape
        if x_inter.shape[2] * 4 != h or x_inter.shape[3] * 4 != w:
            raise ConfigurationError(
                f"feature map {x_inter.shape[2:]} is not a /4 reduction of the {h}x{w} image"
            )
        y = self.channel(self.spatial(x_inter))
        for stage in self.stages:
            y = stage(y)
        return self.out(y)

    def forward(self, x_inter):
        return ad.hardtanh(self.pre_activation(x_inter), self.lo, self.hi)

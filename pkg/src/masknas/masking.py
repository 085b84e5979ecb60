"""Patch masking for the reconstruction task.

Images are cut into non-overlapping P x P patches (row-major patch order,
``(p, q, c)`` order inside a patch), a fixed number of patches is drawn
uniformly without replacement per image, and those patches are zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised when an image cannot be tiled by the requested patch size."""


@dataclass(frozen=True)
class PatchGeometry:
    patch: int
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise GeometryError(
                f"{self.height}x{self.width} image is not divisible into {self.patch}x{self.patch} patches"
            )

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class MaskPlan:
    """Binary patch mask, ``m[b, n] == 1`` marks patch ``n`` of image ``b`` as masked."""

    m: np.ndarray
    ratio: float
    rng_state: dict | None = None

    @property
    def num_masked(self) -> np.ndarray:
        return self.m.sum(axis=-1)


def mask_count(num_patches: int, ratio: float) -> int:
    """``floor(ratio * N)``, robust to ratios like 3/7 that round just below an integer."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1], got {ratio}")
    return min(num_patches, int(math.floor(ratio * num_patches + 1e-9)))


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, P*P*C]."""
    b, c, h, w = x.shape
    geo = PatchGeometry(patch, h, w, c)
    gh, gw = geo.grid
    t = x.reshape(b, c, gh, patch, gw, patch)
    return t.transpose(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, patch * patch * c)


def unpatchify(xp: np.ndarray, patch: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    b, n, d = xp.shape
    c = d // (patch * patch)
    geo = PatchGeometry(patch, height, width, c)
    gh, gw = geo.grid
    if n != gh * gw:
        raise GeometryError(f"{n} patches do not tile a {height}x{width} image")
    t = xp.reshape(b, gh, gw, patch, patch, c)
    return t.transpose(0, 5, 1, 3, 2, 4).reshape(b, c, height, width)


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator, batch: int | None = None) -> MaskPlan:
    """Mask exactly ``floor(ratio * N)`` distinct patches per image.

    Ranking i.i.d. uniforms and taking the first k indices makes every
    k-subset equally likely.
    """
    state = rng.bit_generator.state
    k = mask_count(num_patches, ratio)
    rows = 1 if batch is None else batch
    order = np.argsort(rng.random((rows, num_patches)), axis=1, kind="stable")
    m = np.zeros((rows, num_patches), dtype=np.uint8)
    np.put_along_axis(m, order[:, :k], 1, axis=1)
    return MaskPlan(m[0] if batch is None else m, ratio, state)


def apply_mask(x_p: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``(1 - m) * x_p`` with ``m`` broadcast over the patch dimension."""
    keep = (1 - m.astype(x_p.dtype))[..., None]
    return x_p * keep


def pixel_mask(m: np.ndarray, patch: int, height: int, width: int, channels: int) -> np.ndarray:
    """Patch mask [B, N] expanded to a pixel mask [B, C, H, W]."""
    b, n = m.shape
    full = np.broadcast_to(m[..., None].astype(np.float32), (b, n, patch * patch * channels))
    return unpatchify(np.ascontiguousarray(full), patch, height, width)


def mask_images(x: np.ndarray, patch: int, ratio: float, rng: np.random.Generator):
    """Return ``(x_input, pixel_mask, plan)`` with a fresh mask per image."""
    b, c, h, w = x.shape
    geo = PatchGeometry(patch, h, w, c)
    plan = sample_mask(geo.num_patches, ratio, rng, batch=b)
    x_input = unpatchify(apply_mask(patchify(x, patch), plan.m), patch, h, w)
    return x_input, pixel_mask(plan.m, patch, h, w, c), plan

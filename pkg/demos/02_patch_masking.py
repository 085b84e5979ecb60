"""
Patch masking for masked image modeling
=======================================

Images are cut into non-overlapping P x P patches, a fixed number of
patches is zeroed per image, and the reconstruction loss is measured only
on the hidden pixels.
"""

import numpy as np

from masknas.data import SyntheticSpec, make_synthetic
from masknas.masking import mask_count, mask_images, patchify, unpatchify

ds = make_synthetic(SyntheticSpec(size=20, height=16, width=16)).fit_normalization()
x = ds.standardize(ds.images[:4])
print("batch", x.shape, "classes", ds.labels[:4].tolist())

# %%
# Patchify is a pure reshape, so it round-trips exactly.
xp = patchify(x, 4)
print("patches", xp.shape, "round trip exact:", np.array_equal(unpatchify(xp, 4, 16, 16), x))

# %%
# The number of hidden patches is floor(ratio * N), the same for every
# image; which patches are hidden is drawn independently per image.
for ratio in (0.0, 0.3, 0.6, 1.0):
    print(f"ratio {ratio:.1f}: {mask_count(16, ratio)} of 16 patches")

x_in, pixel_mask, plan = mask_images(x, 4, 0.6, np.random.default_rng(0))
print(plan.m)
print("hidden pixels per image", pixel_mask.reshape(4, -1).mean(axis=1))
print("hidden inputs are zero:", not x_in[pixel_mask == 1].any())

# %%
# A crude text rendering of the first mask on the 4 x 4 patch grid.
for row in plan.m[0].reshape(4, 4):
    print(" ".join("#" if v else "." for v in row))

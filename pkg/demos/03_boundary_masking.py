"""Boundary-mask geometry and gated fusion on a toy two-class step.

Renders the mask band produced by dilating confident foreground/background
predictions, and shows how the gate limits where fine corrections land.
Run: python demos/03_boundary_masking.py
"""

import numpy as np

from lapseg import boundary_mask, fuse_level


def show(binary):
    for row in binary[::2]:
        print("".join("#" if v else "." for v in row[::2]))


h = w = 32
edge = 13
scores = np.zeros((1, 2, h, w))
scores[0, 0, :, :edge + 1] = 6.0
scores[0, 1, :, edge + 1:] = 6.0

mask = boundary_mask(scores, pool=9, tau=0.0)
print(f"mask band covers columns {edge - 3}..{edge + 4} (width 8 = pool-1):")
show(mask[0, 0])
print(f"band width per row: {int(mask[0, 0, 0].sum())}")

coarse = scores.copy()
fine = np.full_like(coarse, 2.5)
fused = fuse_level(coarse, fine, mask)
changed = (fused != coarse).any(axis=1)[0]
print("\npixels changed by fusion (only inside the band):")
show(changed)

print("\nwith tau=1.0 nothing is confident, so the gate opens everywhere:")
mask_all = boundary_mask(scores, pool=9, tau=1.0)
print(f"open fraction: {mask_all.mean():.2f}")

"""Fit the per-class basis dictionary from synthetic segment patches.

Mines binary class patches from generated images, fits the PCA dictionary,
and reports spectra plus held-out reconstruction error as the basis count
grows. Run: python demos/02_pca_dictionary.py
"""

import numpy as np

from lapseg import downsample_basis, extract_class_patches, fit_basis_pca, generate_shapes

samples = generate_shapes(60, 128, 5, seed=7)
names = ["background", "disk", "rectangle", "triangle", "diamond"]

for cls in range(5):
    pset = extract_class_patches(samples, cls, count=800, seed=1)
    comps, sv = fit_basis_pca(pset, 10)
    if comps.shape[0] == 0:
        print(f"{names[cls]}: no patches")
        continue
    spectrum = "  ".join(f"{v:.1f}" for v in sv[:5])
    print(f"{names[cls]:11s} {pset.patches.shape[0]:4d} patches  "
          f"top singular values: {spectrum}")

print("\nheld-out reconstruction error vs basis count (disk class):")
pset = extract_class_patches(samples, 1, count=1000, seed=2)
train, held = pset.patches[:800], pset.patches[800:].reshape(-1, 1024)
comps, _ = fit_basis_pca(type(pset)(1, train), 10)
for k in (1, 2, 4, 6, 8, 10):
    basis = comps[:k].reshape(k, -1)
    err = float(np.mean((held - held @ basis.T @ basis) ** 2))
    print(f"  k={k:2d}: mse={err:.5f}")

small = downsample_basis(comps, 8)
print(f"\nbranch-resolution bank entries: {small.shape} "
      f"(unit norms: {np.allclose(np.linalg.norm(small.reshape(-1, 64), axis=1), 1.0)})")

"""
Predicting a density for water
==============================

A seeded network turns atoms into a floating Gaussian mixture. Each Gaussian
belongs to an atom, but its center may drift away from it.
"""

import numpy as np

from floatorb import GridSpec, Molecule, forward, init_params, integrate, normalize, rasterize

water = Molecule.from_symbols("OHH", [[0, 0, 0.1173], [0, 0.7572, -0.4692], [0, -0.7572, -0.4692]])
water = water.transformed(translation=[5.0, 5.0, 5.0])

# %%
# Four Gaussians per valence electron: 24 on oxygen, 4 on each hydrogen.

res = forward(water, init_params(seed=0))
mix = res.mixture
print(len(mix), "Gaussians; owners per atom:", np.bincount(res.owners))
print("canonicalization ties on atoms:", res.ties)

drift = np.linalg.norm(mix.means - water.positions[res.owners], axis=1)
print(f"center drift from owning atom: mean {drift.mean():.3f} A, max {drift.max():.3f} A")

# %%
# Weights are signed. An untrained network has no reason to favour either sign,
# and the clamp in the density keeps only the positive part of the sum.

print("positive weights:", int((mix.weights > 0).sum()), "of", len(mix))

# %%
# Raster the mixture on a 10 A box, then rescale so it holds 8 electrons.

spec = GridSpec.cube(10.0, 40)
print("raw integral:", integrate(rasterize(mix, spec)))
grid = rasterize(normalize(mix, spec, water.n_valence), spec)
print("normalized integral:", integrate(grid))

# %%
# A slice through the density maximum, printed coarsely.

i, j, k = np.unravel_index(np.argmax(grid.values), grid.shape)
print("maximum at", spec.points()[i, j, k], "A")
plane = grid.values[i, ::4, ::4]
for row in plane.T[::-1]:
    print(" ".join(f"{v:5.2f}" for v in row))

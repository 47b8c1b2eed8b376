"""
A synthetic cratered patch
==========================

Generates the procedural terrain, ray-traces posed views with a Lommel-Seeliger
oracle and saves everything in the on-disk dataset layout (images, cameras,
sun directions, ground-truth maps and surface points).

    python demos/synthetic_dataset.py [out_dir]
"""
import sys

import numpy as np

from photosplat.io import load_dataset, save_dataset
from photosplat.synthscene import make_dataset, make_terrain

out = sys.argv[1] if len(sys.argv) > 1 else "demo_dataset"

terrain = make_terrain(n_craters=4, seed=11)
print("craters:")
for c in terrain.craters:
    print(f"  centre ({c.x:6.1f}, {c.y:6.1f})  radius {c.radius:4.1f}  depth {c.depth:4.2f}")
print("albedo range: %.3f .. %.3f" % (terrain.albedo.min(), terrain.albedo.max()))

ds = make_dataset(terrain, n_views=8, n_test=2, variant="lommel_seeliger", seed=11,
                  width=64, height=64, focal=192.0)
for v in ds.views:
    elev = np.degrees(np.arcsin(v.sun[2]))
    print(f"{v.name:>10} {v.split:>5}  sun elevation {elev:5.1f} deg  "
          f"mean intensity {v.image.mean():.3f}")

save_dataset(ds, out)
again = load_dataset(out)
print("reloaded", len(again.views), "views and", len(again.gt_points), "surface points")

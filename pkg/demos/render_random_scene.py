"""
Rendering a handful of splats
=============================

Builds a few random splats in front of a camera, renders every map the
rasterizer produces and writes them as PNG and float32 arrays.

    python demos/render_random_scene.py [out_dir]
"""
import sys

import numpy as np

from photosplat.io import export_maps
from photosplat.rasterizer import render
from photosplat.synthscene import random_scene

out = sys.argv[1] if len(sys.argv) > 1 else "demo_render"

splats, view = random_scene("lunar_lambert", n_splats=12, size=96, seed=3)
b = render(splats, view)
print("splats:", len(splats))
print("covered pixels:", int((b.accumulation > 0.5).sum()), "of", b.accumulation.size)
print("intensity range: %.3f .. %.3f" % (b.intensity.min(), b.intensity.max()))

# depth is only meaningful where something was hit
valid = b.valid_depth
print("depth range: %.3f .. %.3f" % (b.depth[valid].min(), b.depth[valid].max()))

# normals always face the camera
facing = np.sum(b.normal * -view.camera.rays(), axis=-1)
print("normals facing camera:", bool(np.all(facing[valid] >= 0)))

export_maps(out, view.name, b, bits=16)
print("maps written to", out)

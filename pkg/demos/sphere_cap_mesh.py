"""
From splats to a mesh
=====================

Tangent disks cover a spherical cap.  Their depth maps are fused into a
truncated signed distance volume, meshed with marching cubes, aligned to the
true cap with ICP and scored with the normalised Hausdorff distance.

    python demos/sphere_cap_mesh.py [mesh.ply]
"""
import sys

import numpy as np

from photosplat.eval import align_icp, extract_mesh, hausdorff_normalized
from photosplat.io import write_ply
from photosplat.synthscene import sphere_cap_points, sphere_cap_splats, sphere_cap_views

out = sys.argv[1] if len(sys.argv) > 1 else "sphere_cap.ply"

splats = sphere_cap_splats()
views = sphere_cap_views()
print(len(splats), "splats,", len(views), "views")

mesh = extract_mesh(splats, views)
r = np.linalg.norm(mesh.vertices, axis=1)
print(f"{len(mesh.vertices)} vertices, radius {r.min():.4f} .. {r.max():.4f}")

truth = sphere_cap_points(count=200000)
al = align_icp(mesh.vertices, truth)
print(f"ICP: {al.iterations} iterations, rms {al.rms:.5f}")
print(f"normalised Hausdorff distance: {hausdorff_normalized(al.apply(mesh.vertices), truth):.4f}")

write_ply(out, mesh.vertices, mesh.faces)
print("mesh written to", out)

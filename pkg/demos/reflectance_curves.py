"""
Disk functions side by side
===========================

Prints the three photometric disk functions over a sweep of incidence angles
for an observer looking straight down, then shows how the Lunar-Lambert mix
moves from Lommel-Seeliger towards Lambert as the phase angle grows.
"""
import numpy as np

from photosplat.reflectance import (PhotometricAngles, disk_lambert, disk_lommel_seeliger,
                                    disk_lunar_lambert, phase_weight)

# observer along the normal: emission 0, phase equals incidence
print(f"{'inc':>5} {'lambert':>9} {'l-s':>9} {'lunar-l':>9}")
for inc in range(0, 91, 15):
    a = PhotometricAngles(np.radians(inc), 0.0, np.radians(inc))
    print(f"{inc:>5} {disk_lambert(a):9.4f} {disk_lommel_seeliger(a):9.4f} "
          f"{disk_lunar_lambert(a):9.4f}")

# the phase weight g = exp(-phase / 60 deg)
for phase in (0, 30, 60, 120, 180):
    print(f"phase {phase:>3} deg -> g = {phase_weight(np.radians(phase)):.4f}")

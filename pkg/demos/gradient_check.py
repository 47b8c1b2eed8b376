"""
Analytic gradients against finite differences
=============================================

The backward pass is hand-written.  Here every parameter of a tiny random
scene (and the image's scale and bias) is nudged by +-1e-4 and the central
difference of the full training loss is compared with the analytic value.
"""
import numpy as np

from photosplat.autograd import fd_check
from photosplat.losses import LossConfig
from photosplat.reflectance import VARIANTS
from photosplat.synthscene import random_scene
from photosplat.trainer import loss_function

for variant in VARIANTS:
    splats, view = random_scene(variant, n_splats=3, size=8, seed=0)
    target = np.random.default_rng(1).random((8, 8))
    report = fd_check(splats, view, loss_function(target, LossConfig()))
    print(f"[{variant}]")
    print(report.format())

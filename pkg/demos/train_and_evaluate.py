"""
Training on a small scene
=========================

A short Lambert run on a reduced version of the acceptance scene, followed by
the metric report on the held-out views.  Takes a couple of minutes; the full
7000-iteration round trip lives in the acceptance suite.
"""
import time

from photosplat.eval import evaluate
from photosplat.synthscene import make_dataset, make_terrain
from photosplat.trainer import TrainConfig, train

terrain = make_terrain(seed=0)
ds = make_dataset(terrain, n_views=10, n_test=2, width=64, height=64, focal=192.0, seed=0)
cfg = TrainConfig(variant="lambert", iterations=1000, densify=False, checkpoint_interval=0)


def progress(state):
    if state.iteration % 200 == 0:
        print(f"iter {state.iteration:5d}  loss {state.history[-1][1]:.4f}  splats {len(state.splats)}")


t = time.time()
state = train(ds, cfg, callback=progress)
print(f"trained in {time.time() - t:.0f} s")
print(evaluate(state.splats, ds, state.calibration()).format())

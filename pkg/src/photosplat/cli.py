"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (bad flags, malformed dataset or
config), 2 runtime failure (divergence, failed gradient check, empty volume).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .errors import SplatError, ValidationError

log = logging.getLogger("photosplat")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _cmd_synth(a):
    from .io import save_dataset
    from .synthscene import make_dataset, make_terrain

    terrain = make_terrain(n_craters=a.craters, seed=a.seed, size=a.patch)
    ds = make_dataset(terrain, n_views=a.views, n_test=a.test, variant=a.variant, seed=a.seed,
                      width=a.size, height=a.size, focal=3.0 * a.size)
    save_dataset(ds, a.out)
    print(f"wrote {len(ds.views)} views to {a.out}")


def _cmd_train(a):
    from .io import load_dataset
    from .trainer import TrainConfig, train

    overrides = {"variant": a.variant, "iterations": a.iterations, "seed": a.seed}
    if a.deterministic is not None:
        overrides["deterministic"] = a.deterministic
    if a.config:
        cfg = TrainConfig.from_file(a.config, **overrides)
    else:
        cfg = TrainConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})
    ds = load_dataset(a.data)
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    state = train(ds, cfg, a.out)
    print(f"trained {state.iteration} iterations, {len(state.splats)} splats -> "
          f"{os.path.join(a.out, 'final.ckpt')}")


def _load(a):
    from .io import load_dataset
    from .splats import load_checkpoint

    splats, cal, _ = load_checkpoint(a.checkpoint)
    ds = load_dataset(a.data)
    if cal is not None and len(cal) != len(ds.views):
        raise ValidationError("checkpoint calibration does not match the dataset's view count")
    return splats, cal, ds


def _view(ds, cal, key):
    names = [v.name for v in ds.views]
    if key in names:
        i = names.index(key)
    elif key.isdigit() and int(key) < len(names):
        i = int(key)
    else:
        raise ValidationError(f"--view: no view {key!r}")
    v = ds.views[i]
    return v.with_calibration(*cal[i]) if cal is not None else v


def _cmd_render(a):
    from .io import export_maps
    from .rasterizer import render

    splats, cal, ds = _load(a)
    v = _view(ds, cal, a.view)
    b = render(splats, v, keep_tape=False)
    export_maps(a.out, v.name, b, bits=a.bits)
    print(f"rendered view {v.name} to {a.out}")


def _mesh(splats, ds, a):
    from .eval import extract_mesh
    return extract_mesh(splats, ds.views, voxel=a.voxel, trunc=a.trunc)


def _cmd_eval(a):
    from .eval import align_icp, evaluate, hausdorff_normalized

    splats, cal, ds = _load(a)
    d_h = None
    if a.mesh and ds.gt_points is not None:
        mesh = _mesh(splats, ds, a)
        al = align_icp(mesh.vertices, ds.gt_points)
        d_h = hausdorff_normalized(al.apply(mesh.vertices), ds.gt_points)
    rep = evaluate(splats, ds, cal, hausdorff=d_h)
    rep.to_json(a.out)
    if a.csv:
        rep.to_csv(a.csv)
    print(rep.format())


def _cmd_mesh(a):
    from .io import write_obj, write_ply

    splats, _, ds = _load(a)
    mesh = _mesh(splats, ds, a)
    write_ply(a.out, mesh.vertices, mesh.faces)
    if a.obj:
        write_obj(a.obj, mesh.vertices, mesh.faces, mesh.normals)
    print(f"mesh with {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {a.out}")


def _cmd_fdcheck(a):
    from .autograd import fd_check
    from .losses import LossConfig
    from .reflectance import VARIANTS
    from .synthscene import random_scene
    from .trainer import loss_function

    variants = VARIANTS if a.variant == "all" else (a.variant,)
    ok = True
    for variant in variants:
        splats, view = random_scene(variant, a.splats, a.size, seed=a.seed)
        truth = np.random.default_rng(a.seed + 1).random((a.size, a.size))
        rep = fd_check(splats, view, loss_function(truth, LossConfig()), step=a.step, tol=a.tol)
        print(f"[{variant}]")
        print(rep.format())
        ok &= rep.passed()
    if not ok:
        raise SplatError("gradient check failed")


def build_parser():
    from .reflectance import VARIANTS

    p = _Parser(prog="photosplat", description="Planar Gaussian splatting with photometric models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic terrain dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--variant", default="lambert", choices=VARIANTS[1:])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=22)
    s.add_argument("--test", type=int, default=2)
    s.add_argument("--size", type=int, default=128, help="image width and height in pixels")
    s.add_argument("--patch", type=float, default=64.0, help="terrain patch side length")
    s.add_argument("--craters", type=int, default=6)
    s.set_defaults(func=_cmd_synth)

    t = sub.add_parser("train", help="optimise splats against a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    t.set_defaults(func=_cmd_train)

    for name, fn, hlp in (("render", _cmd_render, "render maps of one view"),
                          ("eval", _cmd_eval, "compute a metric report"),
                          ("mesh", _cmd_mesh, "extract a TSDF mesh")):
        c = sub.add_parser(name, help=hlp)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--out", required=True)
        c.set_defaults(func=fn)
        if name == "render":
            c.add_argument("--view", required=True, help="view name or index")
            c.add_argument("--bits", type=int, choices=(8, 16), default=16)
        else:
            c.add_argument("--voxel", type=float)
            c.add_argument("--trunc", type=float)
        if name == "eval":
            c.add_argument("--csv")
            c.add_argument("--mesh", action="store_true", help="also compute the Hausdorff distance")
        if name == "mesh":
            c.add_argument("--obj")

    f = sub.add_parser("fdcheck", help="compare analytic and finite-difference gradients")
    f.add_argument("--variant", default="all", choices=("all",) + VARIANTS)
    f.add_argument("--splats", type=int, default=3)
    f.add_argument("--size", type=int, default=8)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--step", type=float, default=1e-4)
    f.add_argument("--tol", type=float, default=1e-3)
    f.set_defaults(func=_cmd_fdcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SplatError, OSError, ValueError, FloatingPointError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

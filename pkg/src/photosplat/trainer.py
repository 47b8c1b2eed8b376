"""Optimisation loop: loss evaluation, Adam updates, densification and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .autograd import MapGrads, backward
from .errors import DivergedLoss, ValidationError
from .io import SceneDataset, parse_key_values
from .losses import LossConfig, loss_intensity, loss_normal
from .rasterizer import render
from .reflectance import check_variant
from .splats import (SplatSet, densify_and_prune, init_from_points, reset_opacity,
                     save_checkpoint)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    variant: str = "lambert"
    iterations: int = 30000
    seed: int = 0
    ssim_weight: float = 0.2
    normal_weight: float = 0.05
    normal_ramp: int = 7000
    ssim_window: int = 11
    normal_accum_min: float = 0.5
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_appearance: float = 2.5e-3
    lr_calibration: float = 1e-3
    lr_sh_rest_divisor: float = 20.0
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    grad_threshold: float = 2e-4
    opacity_floor: float = 5e-3
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    checkpoint_interval: int = 5000
    log_interval: int = 100
    deterministic: bool = True

    def __post_init__(self):
        check_variant(self.variant)
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        self.loss_config()

    def loss_config(self):
        return LossConfig(ssim_weight=self.ssim_weight, normal_weight=self.normal_weight,
                          window=self.ssim_window, normal_accum_min=self.normal_accum_min)

    def beta(self, iteration):
        if self.normal_ramp <= 0:
            return self.normal_weight
        return self.normal_weight * min(1.0, iteration / self.normal_ramp)

    @classmethod
    def from_mapping(cls, mapping):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(mapping) - set(names)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        typed = {}
        for k, v in mapping.items():
            default = names[k].default
            try:
                if isinstance(default, bool):
                    typed[k] = _as_bool(k, v)
                elif isinstance(default, int):
                    typed[k] = int(v)
                elif isinstance(default, float):
                    typed[k] = float(v)
                else:
                    typed[k] = str(v)
            except (TypeError, ValueError) as e:
                raise ValidationError(f"{k}: cannot use {v!r} ({e})") from None
        return cls(**typed)

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            mapping = parse_key_values(fh.read())
        mapping.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(mapping)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _as_bool(key, v):
    if isinstance(v, str):
        low = v.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{key}: expected a boolean, got {v!r}")
    return bool(v)


class Adam:
    """Adam over a dict of arrays; rows can be re-indexed after densification."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name, param, grad, lr, rows=None):
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = np.zeros(len(param)) if rows is not None else 0
        m, v = self.m[name], self.v[name]
        if rows is None:
            self.t[name] += 1
            t = self.t[name]
            m *= self.b1
            m += (1 - self.b1) * grad
            v *= self.b2
            v += (1 - self.b2) * grad * grad
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            param -= lr * mhat / (np.sqrt(vhat) + self.eps)
            return
        # sparse update of selected rows, each with its own step count
        self.t[name][rows] += 1
        t = self.t[name][rows].reshape((-1,) + (1,) * (param.ndim - 1))
        m[rows] = self.b1 * m[rows] + (1 - self.b1) * grad
        v[rows] = self.b2 * v[rows] + (1 - self.b2) * grad * grad
        mhat = m[rows] / (1 - self.b1**t)
        vhat = v[rows] / (1 - self.b2**t)
        param[rows] -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def remap(self, name, parents, fresh):
        if name not in self.m:
            return
        for store in (self.m, self.v):
            arr = store[name][parents]
            arr[fresh] = 0.0
            store[name] = arr

    def reset(self, name):
        for store in (self.m, self.v):
            if name in store:
                store[name][:] = 0.0


@dataclass
class TrainState:
    iteration: int
    splats: SplatSet
    cal_log_scale: np.ndarray
    cal_bias: np.ndarray
    optimizer: Adam
    rng: np.random.Generator
    config: TrainConfig
    scene_extent: float
    history: list = field(default_factory=list)

    def calibration(self):
        return np.stack([np.exp(self.cal_log_scale), self.cal_bias], axis=1)

    def view(self, dataset, i):
        v = dataset.views[i]
        return v.with_calibration(np.exp(self.cal_log_scale[i]), self.cal_bias[i])


@dataclass
class LossTerms:
    total: float
    intensity: float
    normal: float


def evaluate_loss(splats, view, truth, cfg: LossConfig, beta):
    """Render, evaluate ``L_I + beta L_n`` and back-propagate.

    Returns ``(LossTerms, GradientSet, bundle, signature)``; the signature
    records every discrete decision of the evaluation.
    """
    bundle = render(splats, view)
    li, g_int = loss_intensity(bundle.intensity, truth, cfg)
    ln = 0.0
    grads = MapGrads(intensity=g_int)
    mask = None
    if beta > 0:
        ln, g_acc, g_nrm, g_dep, mask = loss_normal(bundle, view.camera, cfg)
        grads.accumulation = beta * g_acc
        grads.normal = beta * g_nrm
        grads.depth = beta * g_dep
    g = backward(splats, view, bundle, grads)
    sig = {}
    if bundle.tape is not None:
        prep = bundle.tape["prep"]
        sig = {
            "last": bundle.tape["last"], "checksum": bundle.tape["checksum"],
            "order": bundle.tape["pair_splat"], "visible": prep.visible,
            "flip": prep.flip, "l1_sign": np.sign(bundle.intensity - truth),
            "normal_mask": mask if mask is not None else np.zeros(0, bool),
        }
        for key in ("dmu0", "dmu", "active"):
            if key in prep.shade_cache:
                sig["shade_" + key] = prep.shade_cache[key] != 0
    return LossTerms(li + beta * ln, li, ln), g, bundle, sig


def loss_function(truth, cfg: LossConfig | None = None, beta=None):
    """``loss_fn(splats, view)`` for :func:`photosplat.autograd.fd_check` using the training loss."""
    cfg = cfg or LossConfig()
    beta = cfg.normal_weight if beta is None else beta

    def fn(splats, view):
        terms, g, _, sig = evaluate_loss(splats, view, truth, cfg, beta)
        return terms.total, g, sig
    return fn


def scene_extent(dataset: SceneDataset):
    """Radius of the camera-centre cloud (at least the spread of the initial points)."""
    centres = np.array([v.camera.center for v in dataset.views])
    ext = 1.1 * np.max(np.linalg.norm(centres - centres.mean(axis=0), axis=1))
    if dataset.init_points is not None and len(dataset.init_points) > 1:
        pts = dataset.init_points
        ext = max(ext, 0.5 * np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return float(ext) if ext > 0 else 1.0


def init_state(dataset: SceneDataset, cfg: TrainConfig, splats: SplatSet | None = None):
    if not dataset.train_indices:
        raise ValidationError("dataset has no training views")
    rng = np.random.default_rng(cfg.seed)
    if splats is None:
        mean_int = float(np.mean([dataset.views[i].image.mean() for i in dataset.train_indices]))
        splats = init_from_points(dataset.init_points, cfg.variant, cfg.seed,
                                  random_count=None if dataset.init_points is not None else 10000,
                                  mean_intensity=mean_int)
    m = len(dataset.views)
    return TrainState(0, splats, np.zeros(m), np.zeros(m), Adam(), rng, cfg,
                      scene_extent(dataset))


def _position_lr(cfg, it, extent):
    frac = min(1.0, it / max(cfg.iterations, 1))
    lr = np.exp((1 - frac) * np.log(cfg.lr_position) + frac * np.log(cfg.lr_position_final))
    return lr * extent


def train_step(state: TrainState, dataset: SceneDataset):
    cfg = state.config
    it = state.iteration
    s = state.splats
    train_idx = dataset.train_indices
    vi = train_idx[int(state.rng.integers(len(train_idx)))]
    view = state.view(dataset, vi)
    beta = cfg.beta(it)
    terms, g, bundle, _ = evaluate_loss(s, view, view.image, cfg.loss_config(), beta)
    if not np.isfinite(terms.total):
        raise DivergedLoss(f"non-finite loss at iteration {it}")

    visible = bundle.tape["prep"].visible if bundle.tape is not None else np.zeros(len(s), bool)
    s.grad_accum[visible] += g.screen[visible]
    s.grad_count[visible] += 1

    opt = state.optimizer
    opt.step("means", s.means, g.means, _position_lr(cfg, it, state.scene_extent))
    opt.step("log_scales", s.log_scales, g.log_scales, cfg.lr_scale)
    opt.step("quats", s.quats, g.quats, cfg.lr_rotation)
    opt.step("opacity_logits", s.opacity_logits, g.opacity_logits, cfg.lr_opacity)
    if s.variant == "sh":
        lr = np.full(s.features.shape[1], cfg.lr_appearance / cfg.lr_sh_rest_divisor)
        lr[0] = cfg.lr_appearance
        opt.step("features", s.features, g.features, lr)
    else:
        opt.step("features", s.features, g.features, cfg.lr_appearance)
    rows = np.array([vi])
    opt.step("cal_log_scale", state.cal_log_scale, g.calibration[0:1] * np.exp(state.cal_log_scale[rows]),
             cfg.lr_calibration, rows=rows)
    opt.step("cal_bias", state.cal_bias, g.calibration[1:2], cfg.lr_calibration, rows=rows)
    s.normalize_quats()

    state.iteration = it + 1
    it = state.iteration
    if cfg.densify and cfg.densify_from <= it < cfg.densify_until:
        if it % cfg.densify_interval == 0:
            out, parents, fresh = densify_and_prune(s, cfg.grad_threshold, cfg.opacity_floor,
                                                    state.scene_extent, rng=state.rng,
                                                    return_parents=True)
            for name in s.params():
                opt.remap(name, parents, fresh)
            state.splats = s = out
        if cfg.opacity_reset_interval and it % cfg.opacity_reset_interval == 0:
            reset_opacity(s, cfg.opacity_reset_value)
            opt.reset("opacity_logits")
    return terms, len(state.splats)


def train(dataset: SceneDataset, cfg: TrainConfig, out_dir=None, state: TrainState | None = None,
          callback=None):
    """Run ``cfg.iterations`` steps.  Writes ``log.csv`` and checkpoints to ``out_dir``."""
    if cfg.deterministic:
        import numba
        numba.set_num_threads(1)
    state = state or init_state(dataset, cfg)
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "log.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "loss_intensity", "loss_normal", "splats"])
    try:
        while state.iteration < cfg.iterations:
            try:
                terms, count = train_step(state, dataset)
            except DivergedLoss:
                if out_dir is not None:
                    save_checkpoint(os.path.join(out_dir, "diverged.ckpt"), state.splats,
                                    state.calibration(), state.iteration)
                raise
            row = (state.iteration, terms.total, terms.intensity, terms.normal, count)
            state.history.append(row)
            if writer is not None and (state.iteration % cfg.log_interval == 0
                                       or state.iteration == cfg.iterations):
                writer.writerow([row[0], f"{row[1]:.8g}", f"{row[2]:.8g}", f"{row[3]:.8g}", row[4]])
            if state.iteration % cfg.log_interval == 0:
                log.info("iter %d loss %.5f splats %d", *row[:2], count)
            if out_dir is not None and cfg.checkpoint_interval and \
                    state.iteration % cfg.checkpoint_interval == 0:
                save_checkpoint(os.path.join(out_dir, f"iter_{state.iteration:06d}.ckpt"),
                                state.splats, state.calibration(), state.iteration)
            if callback is not None:
                callback(state)
    finally:
        if writer is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), state.splats, state.calibration(),
                        state.iteration)
    return state

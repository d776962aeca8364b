"""Training loop binding the schedulers to the splat backbone.

One run renders against a ground-truth pyramid at the scheduled factor,
accumulates densification scores from positional gradients, and at each
densification event prunes, thresholds, and clones/splits the top-scored
candidates under the scheduled count ceiling. The baseline mode ("none")
runs every iteration at full resolution with plain threshold
densification, isolating the schedulers as the only variable.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import schedule as sched
from .spectra import Image, antialias_downsample, scaled_extent
from .splat2d import (
    AdamState,
    SplatModel,
    adam_step,
    init_from_image,
    render,
    render_loss_grad,
)

__all__ = [
    "TrainConfig",
    "RunMetrics",
    "ScoreAccumulator",
    "DEFAULT_LR",
    "PSNR_CAP_DB",
    "train",
    "densify",
    "positional_lr",
    "gt_pyramid",
    "psnr",
    "metrics_csv",
    "METRICS_HEADER",
]

# Spatial extent of the normalized scene; split_scale_threshold is a
# fraction of this.
SCENE_EXTENT = 1.0

# Splits follow the usual backbone routine: children offset +-0.5 sigma
# along the major axis, scales divided by 1.6, parent removed.
SPLIT_OFFSET_SIGMA = 0.5
SPLIT_SCALE_DIVISOR = 1.6
CLONE_JITTER_SIGMA = 0.1

PSNR_CAP_DB = 99.0

METRICS_HEADER = "iter,r_floored,n_primitives,pixels,loss"

DEFAULT_LR = {
    "pos": 2e-3,
    "pos_final": 2e-5,
    "log_scale": 6e-3,
    "rotation": 3e-3,
    "opacity_raw": 5e-2,
    "color_raw": 2.5e-2,
}


@dataclass
class TrainConfig:
    """All knobs of one training run; defaults are the production settings."""

    total_iters: int = 2000
    p_init: int = 200
    densify_interval: int = 100
    densify_start: int = 100
    densify_stop: int | None = None      # resolved to 0.8 * total_iters
    grad_threshold: float = 5e-4
    prune_opacity: float = 0.005
    split_scale_threshold: float = 0.01  # fraction of the scene extent
    scheduler_mode: str = "dash"         # "dash" or "none"
    a: float = sched.DEFAULT_SIG_RATIO
    levels: int = sched.DEFAULT_LEVELS
    gamma: float = sched.DEFAULT_GAMMA
    eta: float = sched.DEFAULT_ETA
    fraction_mode: str = "log"           # "log" or "linear"
    full_res_at_first_switch: bool = False
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))

    def __post_init__(self) -> None:
        if self.densify_stop is None:
            self.densify_stop = int(0.8 * self.total_iters)
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        if not 0.0 < self.prune_opacity < 1.0:
            raise ValueError("prune_opacity must lie in (0, 1)")
        if self.densify_stop > self.total_iters:
            raise ValueError("densify_stop cannot exceed total_iters")
        if self.scheduler_mode not in ("dash", "none"):
            raise ValueError(f"unknown scheduler mode {self.scheduler_mode!r}")
        merged = dict(DEFAULT_LR)
        merged.update(self.lr)
        self.lr = merged


@dataclass
class ScoreAccumulator:
    """Running mean of positional-gradient magnitude since the last event."""

    grad_sum: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ScoreAccumulator":
        return cls(grad_sum=np.zeros(n), counts=np.zeros(n, dtype=np.int64))

    def add(self, pos_grad_mag: np.ndarray) -> None:
        if pos_grad_mag.shape != self.grad_sum.shape:
            raise ValueError("score accumulator length does not match primitive count")
        self.grad_sum += pos_grad_mag
        self.counts += pos_grad_mag > 0.0

    def scores(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.counts, 1)

    def reset(self, n: int) -> None:
        self.grad_sum = np.zeros(n)
        self.counts = np.zeros(n, dtype=np.int64)


@dataclass
class RunMetrics:
    """Per-iteration cost/quality record plus run totals."""

    iters: np.ndarray
    r_floored: np.ndarray
    n_primitives: np.ndarray
    pixels: np.ndarray
    loss: np.ndarray
    total_pixels: int
    total_pixel_primitive_cost: int
    wall_ms: float
    psnr_full: float
    final_primitives: int

    def summary_dict(self) -> dict:
        return {
            "psnr_full": min(self.psnr_full, PSNR_CAP_DB),
            "total_pixels": int(self.total_pixels),
            "total_pixel_primitive_cost": int(self.total_pixel_primitive_cost),
            "wall_ms": float(self.wall_ms),
            "final_primitives": int(self.final_primitives),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary_dict(), sort_keys=True) + "\n"


def metrics_csv(metrics: RunMetrics) -> str:
    lines = [METRICS_HEADER]
    for i in range(len(metrics.iters)):
        lines.append(
            f"{metrics.iters[i]},{metrics.r_floored[i]},{metrics.n_primitives[i]},"
            f"{metrics.pixels[i]},{metrics.loss[i]:.9g}"
        )
    return "\n".join(lines) + "\n"


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; +inf for identical inputs."""
    if a.height != b.height or a.width != b.width:
        raise ValueError("image dimensions differ")
    da, db = a.data, b.data
    if a.channels != b.channels:
        da = np.broadcast_to(da, (a.height, a.width, 3))
        db = np.broadcast_to(db, (b.height, b.width, 3))
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gt_pyramid(target: Image, factors: Iterable[int]) -> dict[int, Image]:
    """One anti-aliased ground-truth level per distinct floored factor."""
    pyramid: dict[int, Image] = {}
    for f in sorted(set(int(f) for f in factors)):
        pyramid[f] = target if f == 1 else antialias_downsample(target, float(f))
    return pyramid


def positional_lr(
    iteration: int,
    first_full_res_iter: int,
    total_iters: int,
    lr_init: float,
    lr_final: float,
) -> float:
    """Constant while the floored factor exceeds 1, exponential decay after.

    The decay runs from the first full-resolution iteration k* to
    total_iters, hitting lr_final exactly at the end.
    """
    if iteration < first_full_res_iter:
        return lr_init
    span = total_iters - first_full_res_iter
    if span <= 0:
        return lr_final
    u = (iteration - first_full_res_iter) / span
    return lr_init * (lr_final / lr_init) ** u


def _major_axis(model: SplatModel, idx: np.ndarray):
    sig = model.sigma()[idx]
    cos_t = np.cos(model.rotation[idx])
    sin_t = np.sin(model.rotation[idx])
    first_major = sig[:, 0] >= sig[:, 1]
    # column 0 of R is (cos, sin); column 1 is (-sin, cos)
    dir_x = np.where(first_major, cos_t, -sin_t)
    dir_y = np.where(first_major, sin_t, cos_t)
    sigma_major = np.where(first_major, sig[:, 0], sig[:, 1])
    return np.stack([dir_x, dir_y], axis=1), sigma_major


def densify(
    model: SplatModel,
    scores: np.ndarray,
    p_target: int | None,
    config: TrainConfig,
    rng: np.random.Generator,
    adam: AdamState | None = None,
) -> int:
    """One densification event, mutating ``model`` (and ``adam``) in place.

    Prunes primitives whose mapped opacity fell below the floor, then
    clones or splits the highest-scoring threshold-passing candidates:
    at most ``p_target - survivors`` of them (all of them when
    ``p_target`` is None, the plain backbone behaviour). Small candidates
    are cloned with jitter, large ones split in two along the major axis.

    Returns the full threshold-passing candidate count (the organic
    densification demand), which feeds the budget update.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (model.count,):
        raise ValueError("scores length does not match primitive count")

    keep = model.opacity() >= config.prune_opacity
    if not keep.any():
        keep[int(np.argmax(model.opacity()))] = True  # never drop to zero primitives
    keep_idx = np.nonzero(keep)[0]
    pruned = model.take(keep_idx)
    scores = scores[keep_idx]
    if adam is not None:
        adam.take_rows(keep_idx)
    n_prime = pruned.count

    cand_mask = scores >= config.grad_threshold
    p_add = int(cand_mask.sum())
    if p_target is None:
        k = p_add
    else:
        k = min(p_add, max(0, int(p_target) - n_prime))

    if k <= 0:
        _assign(model, pruned)
        return p_add

    cand_idx = np.nonzero(cand_mask)[0]
    order = np.argsort(-scores[cand_idx], kind="stable")
    chosen = cand_idx[order[:k]]

    axis, sigma_major = _major_axis(pruned, chosen)
    split_mask = sigma_major >= config.split_scale_threshold * SCENE_EXTENT
    clone_ids = chosen[~split_mask]
    split_ids = chosen[split_mask]
    survivors = np.setdiff1d(np.arange(n_prime), split_ids, assume_unique=True)

    rows = {name: [getattr(pruned, name)[survivors]] for name in _GROUP_NAMES}

    if clone_ids.size:
        cos_t = np.cos(pruned.rotation[clone_ids])
        sin_t = np.sin(pruned.rotation[clone_ids])
        local = rng.standard_normal((clone_ids.size, 2)) * (
            CLONE_JITTER_SIGMA * pruned.sigma()[clone_ids]
        )
        jitter = np.stack(
            [
                cos_t * local[:, 0] - sin_t * local[:, 1],
                sin_t * local[:, 0] + cos_t * local[:, 1],
            ],
            axis=1,
        )
        rows["pos"].append(pruned.pos[clone_ids] + jitter)
        rows["log_scale"].append(pruned.log_scale[clone_ids])
        rows["rotation"].append(pruned.rotation[clone_ids])
        rows["opacity_raw"].append(pruned.opacity_raw[clone_ids])
        rows["color_raw"].append(pruned.color_raw[clone_ids])

    if split_ids.size:
        offset = (
            SPLIT_OFFSET_SIGMA
            * sigma_major[split_mask][:, None]
            * axis[split_mask]
        )
        shrunk = pruned.log_scale[split_ids] - math.log(SPLIT_SCALE_DIVISOR)
        for sign in (+1.0, -1.0):
            rows["pos"].append(pruned.pos[split_ids] + sign * offset)
            rows["log_scale"].append(shrunk)
            rows["rotation"].append(pruned.rotation[split_ids])
            rows["opacity_raw"].append(pruned.opacity_raw[split_ids])
            rows["color_raw"].append(pruned.color_raw[split_ids])

    merged = SplatModel(**{name: np.concatenate(rows[name]) for name in _GROUP_NAMES})
    if adam is not None:
        adam.take_rows(survivors)
        adam.append_rows(merged.count - survivors.size)
    _assign(model, merged)
    return p_add


_GROUP_NAMES = ("pos", "log_scale", "rotation", "opacity_raw", "color_raw")


def _assign(model: SplatModel, source: SplatModel) -> None:
    model.pos = source.pos
    model.log_scale = source.log_scale
    model.rotation = source.rotation
    model.opacity_raw = source.opacity_raw
    model.color_raw = source.color_raw


def _floored_curve(target: Image, config: TrainConfig) -> np.ndarray:
    if config.scheduler_mode == "none":
        return np.ones(config.total_iters, dtype=np.int64)
    levels = sched.build_levels([target], config.a, config.levels)
    resolution = sched.build_schedule(
        levels,
        config.total_iters,
        mode=config.fraction_mode,
        full_res_at_first_switch=config.full_res_at_first_switch,
    )
    return resolution.floored_curve()


def train(target: Image, config: TrainConfig, seed: int) -> tuple[SplatModel, RunMetrics]:
    """Fit a splat model to ``target``; deterministic given (config, seed)."""
    floored = _floored_curve(target, config)  # schedule failures abort here
    height, width = target.height, target.width
    pyramid = gt_pyramid(target, floored)

    model = init_from_image(target, config.p_init, seed)
    adam = AdamState.for_model(model)
    accumulator = ScoreAccumulator.zeros(model.count)
    budget = sched.BudgetState.initial(config.p_init, config.gamma, config.eta)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))

    full_res_iters = np.nonzero(floored == 1)[0]
    k_star = int(full_res_iters[0]) if full_res_iters.size else config.total_iters

    n_iter = config.total_iters
    rec_r = np.empty(n_iter, dtype=np.int64)
    rec_n = np.empty(n_iter, dtype=np.int64)
    rec_px = np.empty(n_iter, dtype=np.int64)
    rec_loss = np.empty(n_iter)

    lr = dict(config.lr)
    t0 = time.perf_counter()
    for k in range(n_iter):
        r_f = int(floored[k])
        gt = pyramid[r_f]
        rec_r[k] = r_f
        rec_n[k] = model.count
        rec_px[k] = gt.height * gt.width

        loss, grads, pos_mag = render_loss_grad(model, gt)
        rec_loss[k] = loss
        accumulator.add(pos_mag)

        step_lr = {
            "pos": positional_lr(k, k_star, n_iter, lr["pos"], lr["pos_final"]),
            "log_scale": lr["log_scale"],
            "rotation": lr["rotation"],
            "opacity_raw": lr["opacity_raw"],
            "color_raw": lr["color_raw"],
        }
        adam_step(model, adam, grads, step_lr)

        if (
            k > 0
            and k % config.densify_interval == 0
            and config.densify_start <= k <= config.densify_stop
        ):
            if config.scheduler_mode == "dash":
                p_target = sched.primitive_target(
                    k, r_f, n_iter, config.p_init, budget.p_fin
                )
            else:
                p_target = None
            p_add = densify(model, accumulator.scores(), p_target, config, rng, adam)
            if config.scheduler_mode == "dash":
                budget = sched.budget_update(budget, p_add)
            accumulator.reset(model.count)

    wall_ms = (time.perf_counter() - t0) * 1e3
    final_render = render(model, width, height)
    metrics = RunMetrics(
        iters=np.arange(n_iter, dtype=np.int64),
        r_floored=rec_r,
        n_primitives=rec_n,
        pixels=rec_px,
        loss=rec_loss,
        total_pixels=int(rec_px.sum()),
        total_pixel_primitive_cost=int((rec_px * rec_n).sum()),
        wall_ms=wall_ms,
        psnr_full=psnr(final_render, target),
        final_primitives=model.count,
    )
    return model, metrics

"""Rendering-resolution and primitive-growth schedules.

The resolution schedule is built once, up front, from the spectral
significance of the training views: the maximum downsampling factor is the
one that divides significance by the ratio ``a``, intermediate factors are
solved for linearly sampled significance targets, switch iterations come
from a log-modulated fraction of residual significance, and the
per-iteration factor interpolates linearly in 1/r^2 between switch points.

The primitive side schedules a per-iteration count ceiling that grows with
resolution, bounded by a momentum-style budget estimated online from
densification demand.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .spectra import Image, significance

__all__ = [
    "DEFAULT_SIG_RATIO",
    "DEFAULT_LEVELS",
    "DEFAULT_GAMMA",
    "DEFAULT_ETA",
    "BUDGET_INIT_MULTIPLE",
    "MIN_RENDER_EXTENT",
    "DegenerateScheduleWarning",
    "LevelSet",
    "ResolutionSchedule",
    "BudgetState",
    "solve_max_factor",
    "build_levels",
    "fraction_linear",
    "fraction_log",
    "log_switch_iteration",
    "switch_iterations",
    "build_schedule",
    "resolution_at",
    "floored_resolution",
    "primitive_target",
    "budget_update",
    "steady_state_budget",
]

DEFAULT_SIG_RATIO = 4.0   # full-resolution over minimum-resolution significance
DEFAULT_LEVELS = 8
DEFAULT_GAMMA = 0.98
DEFAULT_ETA = 1.0
BUDGET_INIT_MULTIPLE = 5  # initial budget = 5 * initial primitive count
MIN_RENDER_EXTENT = 8     # factors are capped so round(min(H,W)/r) >= this

_SOLVER_REL_TOL = 1e-3
# Guards floor(r) against 1-ulp undershoot at integer-valued anchors.
_FLOOR_EPS = 1e-9


class DegenerateScheduleWarning(UserWarning):
    """Raised-as-warning when an image admits no downsampling factor > 1."""


@dataclass(frozen=True)
class LevelSet:
    """Solved downsampling factors with their measured significances.

    ``factors`` ascend (all > 1), ``sigs`` are the significances measured
    at those factors and strictly decrease; ``sig_full`` is the
    significance at factor 1.
    """

    a: float
    factors: np.ndarray
    sigs: np.ndarray
    sig_full: float

    @property
    def m(self) -> int:
        return len(self.factors)


@dataclass(frozen=True)
class ResolutionSchedule:
    """Per-iteration continuous/floored factor curve over a training run.

    ``switch_iters[i]`` is the (real-valued) iteration at which the factor
    curve passes through ``level_factors[i]``; ``anchor_iters`` /
    ``anchor_factors`` are the same data in time order plus the endpoint
    anchors used by the interpolator.
    """

    total_iters: int
    level_factors: np.ndarray   # ascending
    switch_iters: np.ndarray    # aligned with level_factors, descending
    anchor_iters: np.ndarray    # time-ascending
    anchor_factors: np.ndarray  # non-increasing, ends at 1.0 unless degenerate

    @property
    def max_factor(self) -> float:
        return float(self.anchor_factors[0])

    def continuous(self, k: float) -> float:
        return resolution_at(self, k)

    def floored(self, k: float) -> int:
        return floored_resolution(resolution_at(self, k))

    def floored_curve(self) -> np.ndarray:
        """Floored factor for every iteration 0..total_iters-1."""
        ks = np.arange(self.total_iters, dtype=np.float64)
        inv_sq = np.interp(ks, self.anchor_iters, 1.0 / self.anchor_factors**2)
        return np.floor(1.0 / np.sqrt(inv_sq) + _FLOOR_EPS).astype(np.int64)


@dataclass(frozen=True)
class BudgetState:
    """Momentum-style accumulator for the final primitive budget."""

    gamma: float
    eta: float
    p_fin: float
    p_init: int

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.p_init < 1:
            raise ValueError("initial primitive count must be >= 1")

    @classmethod
    def initial(
        cls, p_init: int, gamma: float = DEFAULT_GAMMA, eta: float = DEFAULT_ETA
    ) -> "BudgetState":
        return cls(gamma=gamma, eta=eta, p_fin=float(BUDGET_INIT_MULTIPLE * p_init), p_init=p_init)


def _luminances(views: Sequence[Image]) -> list[Image]:
    views = list(views)
    if not views:
        raise ValueError("need at least one view")
    return [v.luminance() for v in views]


def _factor_cap(views: Sequence[Image]) -> float:
    side = min(min(v.height, v.width) for v in views)
    # round(side / r) >= MIN_RENDER_EXTENT  <=>  r <= side / (MIN_RENDER_EXTENT - 0.5)
    return side / (MIN_RENDER_EXTENT - 0.5)


def _solve_factor(
    sig_fn: Callable[[float], float],
    target: float,
    r_cap: float,
    rel_tol: float = _SOLVER_REL_TOL,
    max_iter: int = 100,
) -> float:
    """Bisect the monotone-decreasing sig_fn for |sig_fn(r) - target| minimal."""
    lo, hi = 1.0, float(r_cap)
    val_lo, val_hi = sig_fn(lo), sig_fn(hi)
    best_r, best_err = lo, abs(val_lo - target)
    if abs(val_hi - target) < best_err:
        best_r, best_err = hi, abs(val_hi - target)
    if val_hi >= target:
        return hi  # target unreachable below the cap; cap is the best factor
    if val_lo <= target:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = sig_fn(mid)
        err = abs(val - target)
        if err < best_err:
            best_r, best_err = mid, err
        if err <= rel_tol * target:
            break
        if val > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9:
            break
    return best_r


def solve_max_factor(views: Sequence[Image], a: float = DEFAULT_SIG_RATIO) -> float:
    """Largest scheduled factor: where significance falls to 1/a of full.

    Solved by bisection (significance decreases monotonically in the
    factor) to 1e-3 relative tolerance on the significance target. The
    result is capped so the floored render target stays at least
    MIN_RENDER_EXTENT on the short side; images too small for any factor
    above 1 yield 1.0 with a DegenerateScheduleWarning.
    """
    if a <= 1.0:
        raise ValueError(f"significance ratio a must exceed 1, got {a}")
    lums = _luminances(views)
    r_cap = _factor_cap(lums)
    if r_cap <= 1.0:
        warnings.warn(
            "views too small to admit any downsampling factor above 1",
            DegenerateScheduleWarning,
        )
        return 1.0
    sig_full = significance(lums, 1.0).value
    if sig_full <= 0.0:
        raise ValueError("all-zero views carry no spectral content to schedule")
    sig_fn = lambda r: significance(lums, r).value
    return _solve_factor(sig_fn, sig_full / a, r_cap)


def build_levels(
    views: Sequence[Image], a: float = DEFAULT_SIG_RATIO, m: int = DEFAULT_LEVELS
) -> LevelSet:
    """Solve m factors whose significances sample [sig_full/a, sig_full] linearly.

    Level i targets sig_full - (i/m) * (sig_full - sig_full/a), so level m
    lands on sig_full/a. Factors that collide within solver resolution are
    merged; the returned set may therefore hold fewer than m levels.
    """
    if m < 1:
        raise ValueError(f"level count must be >= 1, got {m}")
    lums = _luminances(views)
    r_max = solve_max_factor(lums, a)
    if r_max <= 1.0:
        raise ValueError("no downsampling headroom; cannot build a level set")
    sig_full = significance(lums, 1.0).value
    sig_fn = lambda r: significance(lums, r).value
    r_cap = _factor_cap(lums)

    factors: list[float] = []
    for i in range(1, m + 1):
        if i == m:
            r_i = r_max
        else:
            target = sig_full - (i / m) * (sig_full - sig_full / a)
            r_i = _solve_factor(sig_fn, target, r_cap)
        factors.append(r_i)

    merged: list[float] = []
    for r_i in factors:
        if r_i <= 1.0:
            continue
        if merged and abs(r_i - merged[-1]) < 1e-6:
            continue
        merged.append(r_i)
    if not merged:
        raise ValueError("all solved factors collapsed to 1; schedule is degenerate")
    merged.sort()
    sigs = np.array([sig_fn(r_i) for r_i in merged])
    keep = np.ones(len(merged), dtype=bool)
    last = sigs[0]
    for i in range(1, len(merged)):
        if sigs[i] >= last:
            keep[i] = False  # measured tie from clamping noise; drop the later level
        else:
            last = sigs[i]
    return LevelSet(
        a=float(a),
        factors=np.asarray(merged, dtype=np.float64)[keep],
        sigs=sigs[keep],
        sig_full=sig_full,
    )


def fraction_linear(x_full: float, x_r: float) -> float:
    """Share of iterations owed to detail absent at the lower resolution."""
    if x_r <= 0.0 or x_full <= 0.0:
        raise ValueError("significances must be positive")
    if x_r > x_full:
        raise ValueError("reduced-resolution significance exceeds full-resolution value")
    return (x_full - x_r) / x_full


def fraction_log(x_full: float, x_min: float, x_r: float) -> float:
    """Log-modulated fraction: compresses the low-resolution stage."""
    if min(x_full, x_min, x_r) <= 0.0:
        raise ValueError("significances must be positive")
    if not x_min <= x_r <= x_full or x_min >= x_full:
        raise ValueError("significances must satisfy x_min <= x_r <= x_full, x_min < x_full")
    return math.log(x_full / x_r) / math.log(x_full / x_min)


def log_switch_iteration(x_r: float, x_full: float, x_min: float, total_iters: int) -> float:
    """Iteration at which the factor with significance x_r is left behind."""
    return total_iters * (1.0 - fraction_log(x_full, x_min, x_r))


def switch_iterations(
    levels: LevelSet, total_iters: int, mode: str = "log"
) -> np.ndarray:
    """Real-valued switch iteration per level, aligned with levels.factors.

    "log" is the production schedule; "linear" keeps the plain fraction
    and is exposed for ablations. The largest factor switches at 0 under
    "log" (enforced exactly) and at total_iters/a under "linear".
    """
    if total_iters < levels.m:
        raise ValueError("total iterations must be at least the level count")
    sigs = levels.sigs
    if np.any(sigs <= 0.0) or levels.sig_full <= 0.0:
        raise ValueError("significances must be positive")
    if mode == "log":
        x_min = float(sigs[-1])
        if x_min >= levels.sig_full:
            raise ValueError("minimum-level significance must be below the full value")
        out = np.array(
            [log_switch_iteration(float(x), levels.sig_full, x_min, total_iters) for x in sigs]
        )
        out[-1] = 0.0
    elif mode == "linear":
        out = np.array(
            [total_iters * (1.0 - fraction_linear(levels.sig_full, float(x))) for x in sigs]
        )
    else:
        raise ValueError(f"unknown fraction mode {mode!r}")
    return out


def build_schedule(
    levels: LevelSet,
    total_iters: int,
    mode: str = "log",
    full_res_at_first_switch: bool = False,
) -> ResolutionSchedule:
    """Assemble the per-iteration factor curve from a solved level set.

    By default the final segment interpolates the smallest level factor
    toward 1 at iteration total_iters; with ``full_res_at_first_switch``
    the curve instead reaches 1 at that level's switch iteration and holds.
    """
    switches = switch_iterations(levels, total_iters, mode)
    anchor_iters = list(switches[::-1])          # time ascending
    anchor_factors = list(levels.factors[::-1])  # descending
    if full_res_at_first_switch and len(anchor_factors) >= 2:
        anchor_factors[-1] = 1.0
    else:
        anchor_iters.append(float(total_iters))
        anchor_factors.append(1.0)

    it_arr, f_arr = [], []
    for it, f in zip(anchor_iters, anchor_factors):
        if it_arr and it - it_arr[-1] < 1e-9:
            f_arr[-1] = f  # zero-length segment: jump directly to the later factor
            continue
        it_arr.append(float(it))
        f_arr.append(float(f))
    return ResolutionSchedule(
        total_iters=int(total_iters),
        level_factors=levels.factors.copy(),
        switch_iters=switches,
        anchor_iters=np.asarray(it_arr),
        anchor_factors=np.asarray(f_arr),
    )


def resolution_at(schedule: ResolutionSchedule, k: float) -> float:
    """Continuous factor at iteration k, linear in 1/r^2 between anchors."""
    if not 0 <= k < schedule.total_iters:
        raise ValueError(f"iteration {k} outside [0, {schedule.total_iters})")
    inv_sq = float(
        np.interp(k, schedule.anchor_iters, 1.0 / schedule.anchor_factors**2)
    )
    return 1.0 / math.sqrt(inv_sq)


def floored_resolution(r_continuous: float) -> int:
    """Integer factor actually rendered: floor of the continuous value."""
    if r_continuous < 1.0:
        raise ValueError(f"continuous factor must be >= 1, got {r_continuous}")
    return int(math.floor(r_continuous + _FLOOR_EPS))


def primitive_target(
    i: int, r_floored: float, total_iters: int, p_init: int, p_fin: float
) -> int:
    """Primitive-count ceiling at iteration i for rendering factor r.

    The gap to the final budget is divided by r^(2 - i/S): quadratic
    suppression early (count tracks rendered pixels), easing to linear by
    the end so late growth stays tame.
    """
    if not 0 <= i <= total_iters:
        raise ValueError(f"iteration {i} outside [0, {total_iters}]")
    if r_floored < 1.0:
        raise ValueError("rendering factor must be >= 1")
    if p_init < 1:
        raise ValueError("initial primitive count must be >= 1")
    if p_fin < p_init:
        raise ValueError("final budget below initial primitive count")
    power = 2.0 - i / total_iters
    value = p_init + (p_fin - p_init) / r_floored**power
    return int(math.floor(value + 0.5))


def budget_update(state: BudgetState, p_add: int) -> BudgetState:
    """Fold one densification demand into the budget, never decreasing it."""
    if p_add < 0:
        raise ValueError("densification demand cannot be negative")
    candidate = state.gamma * state.p_fin + state.eta * p_add
    return replace(state, p_fin=max(state.p_fin, candidate))


def steady_state_budget(gamma: float, eta: float, p_add: float) -> float:
    """Fixed point of the budget recurrence under constant demand."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if eta <= 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    return eta / (1.0 - gamma) * p_add

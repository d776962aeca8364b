"""Optimization-complexity scheduling for 2D Gaussian-splat image fitting.

The library schedules two cost drivers of splat optimization: the
rendering resolution (from the spectral significance of the training
views) and the primitive count (from a momentum-style budget fed by
densification demand). A small differentiable 2D splatting backbone and
training loop measure the cost reduction the schedulers deliver.
"""

__version__ = "0.1.0"

from .spectra import (
    Image,
    Significance,
    SpectrumMap,
    antialias_downsample,
    dft2,
    idft2,
    scaled_extent,
    significance,
)
from .schedule import (
    BudgetState,
    LevelSet,
    ResolutionSchedule,
    budget_update,
    build_levels,
    build_schedule,
    floored_resolution,
    fraction_linear,
    fraction_log,
    primitive_target,
    resolution_at,
    solve_max_factor,
    steady_state_budget,
    switch_iterations,
)
from .splat2d import (
    AdamState,
    Gaussian2D,
    ParamGrads,
    SplatModel,
    adam_step,
    init_from_image,
    render,
    render_loss_grad,
)
from .trainer import (
    RunMetrics,
    ScoreAccumulator,
    TrainConfig,
    densify,
    gt_pyramid,
    positional_lr,
    psnr,
    train,
)
from .io import load_image, save_png

__all__ = [
    "Image",
    "SpectrumMap",
    "Significance",
    "dft2",
    "idft2",
    "antialias_downsample",
    "significance",
    "scaled_extent",
    "LevelSet",
    "ResolutionSchedule",
    "BudgetState",
    "solve_max_factor",
    "build_levels",
    "fraction_linear",
    "fraction_log",
    "switch_iterations",
    "build_schedule",
    "resolution_at",
    "floored_resolution",
    "primitive_target",
    "budget_update",
    "steady_state_budget",
    "Gaussian2D",
    "SplatModel",
    "ParamGrads",
    "AdamState",
    "render",
    "render_loss_grad",
    "adam_step",
    "init_from_image",
    "TrainConfig",
    "RunMetrics",
    "ScoreAccumulator",
    "train",
    "densify",
    "positional_lr",
    "gt_pyramid",
    "psnr",
    "load_image",
    "save_png",
    "__version__",
]

"""Command-line entry points: analyze, fit, compare, replay.

Every command materializes its full configuration into a manifest JSON
next to its outputs; ``replay`` re-runs a manifest and reproduces all
text outputs byte-identically. Files are written atomically (temp file
then rename) so commands are idempotent over their output directory.

Exit codes: 0 success, 1 input error, 2 numerical failure. The
``DASH_THREADS`` environment variable caps the worker count; the current
kernels are single-threaded and bit-deterministic at any setting, and the
value is recorded in the manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import schedule as sched
from .io import load_image, save_png
from .trainer import (
    DEFAULT_LR,
    PSNR_CAP_DB,
    RunMetrics,
    TrainConfig,
    metrics_csv,
    train,
)
from .splat2d import checkpoint_csv

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NUMERICAL_ERROR = 2


def _dash_threads() -> int:
    raw = os.environ.get("DASH_THREADS", "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"DASH_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ValueError(f"DASH_THREADS must be >= 1, got {value}")
    return value


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir: Path, manifest: dict) -> None:
    _write_text_atomic(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    lr = dict(DEFAULT_LR)
    lr.update(
        pos=args.lr_pos,
        pos_final=args.lr_pos_final,
        log_scale=args.lr_scale,
        rotation=args.lr_rotation,
        opacity_raw=args.lr_opacity,
        color_raw=args.lr_color,
    )
    return TrainConfig(
        total_iters=args.iters,
        p_init=args.p_init,
        densify_interval=args.densify_interval,
        densify_start=args.densify_start,
        densify_stop=args.densify_stop,
        grad_threshold=args.grad_threshold,
        prune_opacity=args.prune_opacity,
        split_scale_threshold=args.split_scale_threshold,
        scheduler_mode=getattr(args, "mode", "dash"),
        a=args.a,
        levels=args.levels,
        gamma=args.gamma,
        eta=args.eta,
        fraction_mode=args.fraction_mode,
        full_res_at_first_switch=args.full_res_at_first_switch,
        lr=lr,
    )


def _schedule_csv(resolution: sched.ResolutionSchedule, p_init: int) -> str:
    p_fin0 = float(sched.BUDGET_INIT_MULTIPLE * p_init)
    lines = ["iter,r_continuous,r_floored,p_target,p_fin"]
    total = resolution.total_iters
    for k in range(total):
        r_cont = sched.resolution_at(resolution, k)
        r_floor = sched.floored_resolution(r_cont)
        p_t = sched.primitive_target(k, r_floor, total, p_init, p_fin0)
        lines.append(f"{k},{r_cont:.6g},{r_floor},{p_t},{p_fin0:.6g}")
    return "\n".join(lines) + "\n"


def run_analyze(inputs: list[str], out_dir: str, a: float, levels: int,
                iters: int, p_init: int, fraction_mode: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = [load_image(p) for p in inputs]
    level_set = sched.build_levels(views, a, levels)
    resolution = sched.build_schedule(level_set, iters, mode=fraction_mode)

    sig_lines = ["r,significance"]
    sig_lines.append(f"1,{level_set.sig_full:.6g}")
    for r_i, sig_i in zip(level_set.factors, level_set.sigs):
        sig_lines.append(f"{r_i:.6g},{sig_i:.6g}")
    _write_text_atomic(out / "significance.csv", "\n".join(sig_lines) + "\n")
    _write_text_atomic(out / "schedule.csv", _schedule_csv(resolution, p_init))

    _write_manifest(out, {
        "command": "analyze",
        "tool_version": __version__,
        "inputs": list(inputs),
        "out_dir": str(out_dir),
        "dash_threads": _dash_threads(),
        "config": {
            "a": a,
            "levels": levels,
            "iters": iters,
            "p_init": p_init,
            "fraction_mode": fraction_mode,
        },
    })


def _write_fit_outputs(out: Path, model, metrics: RunMetrics, target) -> None:
    from .splat2d import render

    _write_text_atomic(out / "checkpoint.csv", checkpoint_csv(model))
    _write_text_atomic(out / "metrics.csv", metrics_csv(metrics))
    _write_text_atomic(out / "summary.json", metrics.summary_json())
    save_png(render(model, target.width, target.height), out / "render.png")


def run_fit(input_path: str, out_dir: str, seed: int, config: TrainConfig) -> RunMetrics:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = load_image(input_path)
    model, metrics = train(target, config, seed)
    _write_fit_outputs(out, model, metrics, target)
    _write_manifest(out, {
        "command": "fit",
        "tool_version": __version__,
        "inputs": [input_path],
        "out_dir": str(out_dir),
        "seed": seed,
        "dash_threads": _dash_threads(),
        "config": asdict(config),
    })
    return metrics


def run_compare(input_path: str, out_dir: str, seed: int, config: TrainConfig) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = load_image(input_path)

    results = {}
    for mode in ("dash", "none"):
        cfg_dict = asdict(config)
        cfg_dict["scheduler_mode"] = mode
        cfg = TrainConfig(**cfg_dict)
        model, metrics = train(target, cfg, seed)
        mode_dir = out / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        _write_fit_outputs(mode_dir, model, metrics, target)
        results[mode] = metrics

    dash, none = results["dash"], results["none"]
    report = {
        "psnr_dash_db": min(dash.psnr_full, PSNR_CAP_DB),
        "psnr_none_db": min(none.psnr_full, PSNR_CAP_DB),
        "psnr_delta_db": min(dash.psnr_full, PSNR_CAP_DB) - min(none.psnr_full, PSNR_CAP_DB),
        "pixel_cost_reduction_pct": 100.0 * (1.0 - dash.total_pixels / none.total_pixels),
        "pixel_primitive_cost_reduction_pct": 100.0
        * (1.0 - dash.total_pixel_primitive_cost / none.total_pixel_primitive_cost),
        "wall_time_reduction_pct": 100.0 * (1.0 - dash.wall_ms / none.wall_ms),
    }
    _write_text_atomic(out / "compare.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_manifest(out, {
        "command": "compare",
        "tool_version": __version__,
        "inputs": [input_path],
        "out_dir": str(out_dir),
        "seed": seed,
        "dash_threads": _dash_threads(),
        "config": asdict(config),
    })
    return report


def run_replay(manifest_path: str) -> None:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    command = manifest.get("command")
    cfg = manifest.get("config", {})
    if command == "analyze":
        run_analyze(
            manifest["inputs"], manifest["out_dir"], cfg["a"], cfg["levels"],
            cfg["iters"], cfg["p_init"], cfg["fraction_mode"],
        )
    elif command == "fit":
        run_fit(manifest["inputs"][0], manifest["out_dir"], manifest["seed"], TrainConfig(**cfg))
    elif command == "compare":
        run_compare(manifest["inputs"][0], manifest["out_dir"], manifest["seed"], TrainConfig(**cfg))
    else:
        raise ValueError(f"manifest has unknown command {command!r}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, default=2000, help="total optimization iterations")
    p.add_argument("--p-init", type=int, default=200, dest="p_init",
                   help="initial primitive count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--a", type=float, default=sched.DEFAULT_SIG_RATIO,
                   help="full/minimum resolution significance ratio")
    p.add_argument("--levels", type=int, default=sched.DEFAULT_LEVELS,
                   help="resolution level count")
    p.add_argument("--gamma", type=float, default=sched.DEFAULT_GAMMA,
                   help="budget momentum decay")
    p.add_argument("--eta", type=float, default=sched.DEFAULT_ETA,
                   help="budget demand gain")
    p.add_argument("--densify-interval", type=int, default=100)
    p.add_argument("--densify-start", type=int, default=100)
    p.add_argument("--densify-stop", type=int, default=None)
    p.add_argument("--grad-threshold", type=float, default=5e-4)
    p.add_argument("--prune-opacity", type=float, default=0.005)
    p.add_argument("--split-scale-threshold", type=float, default=0.01)
    p.add_argument("--fraction-mode", choices=("log", "linear"), default="log")
    p.add_argument("--full-res-at-first-switch", action="store_true")
    p.add_argument("--lr-pos", type=float, default=DEFAULT_LR["pos"])
    p.add_argument("--lr-pos-final", type=float, default=DEFAULT_LR["pos_final"])
    p.add_argument("--lr-scale", type=float, default=DEFAULT_LR["log_scale"])
    p.add_argument("--lr-rotation", type=float, default=DEFAULT_LR["rotation"])
    p.add_argument("--lr-opacity", type=float, default=DEFAULT_LR["opacity_raw"])
    p.add_argument("--lr-color", type=float, default=DEFAULT_LR["color_raw"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dashsplat",
        description="Schedule rendering resolution and primitive growth for 2D splat fitting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_analyze = sub.add_parser("analyze", help="export resolution schedule and significance table")
    p_analyze.add_argument("inputs", nargs="+", help="one or more training images")
    p_analyze.add_argument("--out", required=True)
    p_analyze.add_argument("--a", type=float, default=sched.DEFAULT_SIG_RATIO)
    p_analyze.add_argument("--levels", type=int, default=sched.DEFAULT_LEVELS)
    p_analyze.add_argument("--iters", type=int, default=2000)
    p_analyze.add_argument("--p-init", type=int, default=200, dest="p_init")
    p_analyze.add_argument("--fraction-mode", choices=("log", "linear"), default="log")

    p_fit = sub.add_parser("fit", help="fit a splat model to one image")
    p_fit.add_argument("input")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--mode", choices=("dash", "none"), default="dash")
    _add_train_flags(p_fit)

    p_cmp = sub.add_parser("compare", help="run scheduled and baseline fits, report deltas")
    p_cmp.add_argument("input")
    p_cmp.add_argument("--out", required=True)
    _add_train_flags(p_cmp)

    p_rep = sub.add_parser("replay", help="re-run a recorded manifest")
    p_rep.add_argument("manifest")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "analyze":
            run_analyze(
                args.inputs, args.out, args.a, args.levels,
                args.iters, args.p_init, args.fraction_mode,
            )
        elif args.command == "fit":
            run_fit(args.input, args.out, args.seed, _config_from_args(args))
        elif args.command == "compare":
            run_compare(args.input, args.out, args.seed, _config_from_args(args))
        elif args.command == "replay":
            run_replay(args.manifest)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: gen, train, eval, render.

Every command takes --config (flat key=value file) and a few override
flags. Exit codes: 0 success, 2 configuration or input problem, 3
numerical failure (non-finite loss or weights).
"""
import argparse
import csv
import dataclasses
import json
import math
import os
import sys

import numpy as np

from . import config as config_lib
from . import sim
from .baselines import cv_baseline_records, record_to_pmf, records_to_scene
from .config import ConfigError, RunConfig, load_config
from .grid import NumericalError
from .learning import train, write_trace
from .metrics import (EvalSettings, evaluate_forecasts, evaluate_model,
                      final_step_pr, write_report)
from .model import (FrameForecast, detect_frame, load_checkpoint, make_model,
                    prepare_frames, save_checkpoint)
from .perception import Detection
from .render import render_heatmaps, svg_pr_curve, svg_reliability


def _require(path, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} path not set")
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return str(path)


def _dataset_file(path) -> str:
    """Accept the dataset directory or the frames file itself."""
    resolved = _require(path, "dataset")
    if os.path.isdir(resolved):
        return _require(os.path.join(resolved, "frames.jsonl"), "dataset")
    return resolved


def _threads(cfg: RunConfig) -> int | None:
    return cfg.threads or None


def _build_model(cfg: RunConfig, seed=None):
    return make_model(cfg.seed if seed is None else seed,
                      config_lib.model_settings(cfg))


# ---------------------------------------------------------------------------
# gen


def cmd_gen(cfg: RunConfig, args) -> int:
    out = args.out or cfg.data_dir
    os.makedirs(out, exist_ok=True)
    dataset = sim.generate_dataset(config_lib.world_config(cfg),
                                   config_lib.dataset_plan(cfg), out,
                                   threads=_threads(cfg))
    worlds = math.ceil(cfg.n_frames / cfg.frames_per_world)
    manifest = {
        "frames": cfg.n_frames,
        "horizon": cfg.horizon,
        "seed": cfg.seed,
        "sweeps_per_frame": cfg.n_sweep,
        "worlds": worlds,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"wrote {cfg.n_frames} frames from {worlds} worlds to {dataset}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig, args) -> int:
    data = _dataset_file(args.data or cfg.data_dir)
    out = args.out or cfg.checkpoint
    resume = args.resume or cfg.resume

    model = _build_model(cfg)
    frames = prepare_frames(data, model, threads=_threads(cfg))
    # the sampling schedule scales from the config's planned budget, never
    # from the per-invocation count, so resumed runs replay a straight run
    settings = config_lib.train_settings(cfg)
    count = cfg.iterations if args.iterations is None else args.iterations

    adam, start = None, 0
    if resume:
        adam, start = load_checkpoint(_require(resume, "checkpoint"), model)
    total = start + count
    settings = dataclasses.replace(settings, iterations=total)

    result = train(model, frames, settings, adam=adam, start_iteration=start)
    save_checkpoint(out, model, result.adam, total)

    if resume and os.path.exists(cfg.trace):
        with open(cfg.trace, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in result.rows:
                writer.writerow(row.as_csv())
    else:
        write_trace(result.rows, cfg.trace)

    span = (f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}"
            if result.rows else "no new iterations")
    print(f"trained {count} iterations (total {total}); {span}; "
          f"checkpoint {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_model(cfg: RunConfig, checkpoint) -> tuple:
    model = _build_model(cfg)
    _, iteration = load_checkpoint(_require(checkpoint, "checkpoint"), model)
    return model, iteration


def _baseline_forecasts(cfg: RunConfig, frames, path) -> list[FrameForecast]:
    from .baselines import read_baseline_jsonl

    by_frame: dict = {}
    for rec in read_baseline_jsonl(_require(path, "baseline file")):
        by_frame.setdefault(rec["frame_id"], []).append(rec)

    settings = config_lib.model_settings(cfg)
    actor_grid = settings.interaction.actor_grid
    scene_grid = settings.scene_grid
    horizon = settings.horizon
    forecasts = []
    for frame in frames:
        records = by_frame.get(frame.frame_id, [])
        dets, pmfs = [], []
        for rec in records:
            pose = rec.get("pose", (0.0, 0.0, 0.0))
            dets.append(Detection(1.0, pose[0], pose[1], pose[2]))
            pmfs.append(record_to_pmf(rec, actor_grid,
                                      renormalize=True).pmf)
        if records:
            scene = records_to_scene(records, actor_grid, scene_grid)
        else:
            scene = np.zeros((horizon,) + scene_grid.shape)
        forecasts.append(FrameForecast(frame.frame_id, dets, pmfs,
                                       scene, scene.copy()))
    return forecasts


def _write_plots(cfg: RunConfig, report, frames) -> None:
    if not cfg.plots_dir or report.forecasts is None:
        return
    os.makedirs(cfg.plots_dir, exist_ok=True)
    curve = final_step_pr(report.forecasts, frames)
    svg_pr_curve(curve.recall, curve.precision,
                 os.path.join(cfg.plots_dir, "pr_curve.svg"), ap=curve.ap)
    rel = report.diagnostics["reliability"]
    svg_reliability(rel["mean_confidence"], rel["accuracy"], rel["count"],
                    os.path.join(cfg.plots_dir, "reliability.svg"),
                    ace=report.metrics["ace"], mce=report.metrics["mce"])
    first = report.forecasts[0]
    render_heatmaps(os.path.join(cfg.plots_dir, "scene"), first.scene)
    render_heatmaps(os.path.join(cfg.plots_dir, "aggregation"),
                    first.aggregation)


def cmd_eval(cfg: RunConfig, args) -> int:
    overrides = {}
    if args.suppress_fraction is not None:
        overrides["suppress_fraction"] = args.suppress_fraction
    if args.ablation is not None:
        overrides["ablation"] = args.ablation
    if args.report is not None:
        overrides["report"] = args.report
    if args.baseline is not None:
        overrides["baseline"] = args.baseline
    if overrides:
        cfg = cfg.replace(**overrides)

    data = _dataset_file(args.data or cfg.data_dir)
    settings = config_lib.eval_settings(cfg)

    if cfg.baseline:
        if settings.suppress_fraction:
            raise ConfigError("suppression applies to model evaluation only")
        model = _build_model(cfg)
        frames = prepare_frames(data, model, threads=_threads(cfg))
        forecasts = _baseline_forecasts(cfg, frames, cfg.baseline)
        report = evaluate_forecasts(
            forecasts, frames, model.settings.interaction.actor_grid,
            settings)
        report.forecasts = forecasts
    else:
        model, _ = _load_model(cfg, args.checkpoint or cfg.checkpoint)
        frames = prepare_frames(data, model, threads=_threads(cfg))
        report = evaluate_model(model, frames, settings, keep_forecasts=True)
        if args.write_cv_baseline:
            _write_cv_baseline(cfg, model, frames, args.write_cv_baseline)

    write_report(report, cfg.report)
    _write_plots(cfg, report, frames)
    print(report.to_json(), end="")
    return 0


def _write_cv_baseline(cfg: RunConfig, model, frames, path) -> None:
    from .baselines import write_baseline_jsonl

    records = []
    for frame in frames:
        dets, _, _ = detect_frame(model, frame, min_score=cfg.decode_score)
        records.extend(cv_baseline_records(frame.frame_id, dets,
                                           cfg.horizon))
    write_baseline_jsonl(path, records)
    print(f"wrote constant-velocity baseline ({len(records)} records) "
          f"to {path}")


# ---------------------------------------------------------------------------
# render


def cmd_render(cfg: RunConfig, args) -> int:
    data = _dataset_file(args.data or cfg.data_dir)
    model, _ = _load_model(cfg, args.checkpoint or cfg.checkpoint)
    frames = prepare_frames(data, model, threads=_threads(cfg))
    idx = cfg.render_frame if args.frame is None else args.frame
    if not 0 <= idx < len(frames):
        raise ConfigError(f"render_frame {idx} outside 0..{len(frames) - 1}")

    settings = config_lib.eval_settings(cfg)
    report = evaluate_model(model, frames, settings, keep_forecasts=True)
    prefix = args.out or cfg.render_prefix
    parent = os.path.dirname(str(prefix))
    if parent:
        os.makedirs(parent, exist_ok=True)

    chosen = report.forecasts[idx]
    paths = render_heatmaps(f"{prefix}_scene", chosen.scene)
    paths += render_heatmaps(f"{prefix}_aggregation", chosen.aggregation)
    curve = final_step_pr(report.forecasts, frames)
    svg_pr_curve(curve.recall, curve.precision, f"{prefix}_pr.svg",
                 ap=curve.ap)
    rel = report.diagnostics["reliability"]
    svg_reliability(rel["mean_confidence"], rel["accuracy"], rel["count"],
                    f"{prefix}_reliability.svg",
                    ace=report.metrics["ace"], mce=report.metrics["mce"])
    print(f"rendered frame {chosen.frame_id}: {len(paths)} heatmaps "
          f"+ 2 curves at {prefix}*")
    return 0


# ---------------------------------------------------------------------------
# entry


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pedforecast",
        description="Synthetic pedestrian detection and occupancy "
                    "forecasting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", help="output directory (default: data_dir)")

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", help="dataset directory")
    tr.add_argument("--out", help="checkpoint path")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--iterations", type=int)

    ev = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    ev.add_argument("--config", required=True)
    ev.add_argument("--data")
    ev.add_argument("--checkpoint")
    ev.add_argument("--baseline", help="baseline JSONL instead of a model")
    ev.add_argument("--report")
    ev.add_argument("--suppress-fraction", type=float, dest="suppress_fraction")
    ev.add_argument("--ablation", choices=("none", "no-s2a", "no-scene",
                                           "no-graph"))
    ev.add_argument("--write-cv-baseline", dest="write_cv_baseline",
                    help="also write a constant-velocity baseline JSONL")

    rd = sub.add_parser("render", help="render heatmaps and curves")
    rd.add_argument("--config", required=True)
    rd.add_argument("--data")
    rd.add_argument("--checkpoint")
    rd.add_argument("--frame", type=int)
    rd.add_argument("--out", help="output path prefix")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "render": cmd_render}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(_require(args.config, "config"))
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

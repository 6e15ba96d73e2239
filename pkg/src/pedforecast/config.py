"""Flat key=value run configuration with strict key checking.

One file drives every command: world synthesis, grids, network widths,
graph hyperparameters, loss weights, schedules, and evaluation knobs.
Unknown keys are rejected by name. Two presets exist: "desk" (the
default, small enough to train on a CPU in minutes) and "paper-atg4d"
(the published full-scale constants, documented but not sized for
desk hardware).
"""
from dataclasses import dataclass

from . import sim
from .geometry import GridSpec
from .interaction import InteractionConfig
from .learning import (LossWeights, ScheduledSamplingPolicy, TrainSettings)
from .metrics import EvalSettings
from .model import ABLATIONS, ModelSettings
from .perception import BackboneConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _stack(text: str) -> tuple[tuple[int, int, int], ...]:
    """Conv layer triples, e.g. "4:2:1,4:2:0,3:1:0" -> ((4,2,1), ...)."""
    out = []
    for part in text.split(","):
        bits = part.split(":")
        if len(bits) != 3:
            raise ValueError(f"layer triple must be k:s:p, got {part!r}")
        out.append(tuple(int(b) for b in bits))
    return tuple(out)


# name -> (parser, desk default)
SCHEMA: dict = {
    # run
    "preset": (str, "desk"),
    "seed": (int, 0),
    "threads": (int, 0),                 # 0 = automatic
    # world / dataset
    "data_dir": (str, "data"),
    "n_frames": (int, 200),
    "frames_per_world": (int, 10),
    "area_x": (float, 32.0),
    "area_y": (float, 32.0),
    "ped_count_min": (int, 3),
    "ped_count_max": (int, 8),
    "points_min": (int, 8),
    "points_max": (int, 25),
    "dropout": (float, 0.05),
    "label_dt": (float, 0.5),
    # grids
    "scene_rows": (int, 64),
    "scene_cols": (int, 64),
    "scene_resolution": (float, 0.5),
    "actor_rows": (int, 16),
    "actor_cols": (int, 16),
    "actor_resolution": (float, 1.0),
    "n_sweep": (int, 3),
    "depth_slabs": (int, 1),
    "horizon": (int, 10),
    # backbone / detection
    "lidar_widths": (_ints, (8, 16, 32)),
    "map_widths": (_ints, (8, 16, 32)),
    "backbone_strides": (_ints, (1, 2, 2)),
    "header_width": (int, 32),
    "context_channels": (int, 14),
    "det_head_width": (int, 32),
    "nms_radius": (float, 0.3),
    "max_actors": (int, 32),
    # interaction graph
    "emb_channels": (int, 16),
    "vector_widths": (_ints, (16, 16)),
    "vector_stack": (_stack, ((4, 2, 1), (4, 2, 0), (3, 1, 0))),
    "vector_dim": (int, 32),
    "msg_channels": (int, 16),
    "scene_channels": (int, 16),
    "head_width": (int, 16),
    "scene_head_width": (int, 32),
    "scene_upsample": (int, 2),
    "mp_rounds": (int, 2),
    "knn_k": (int, 6),
    "neighbor_radius": (float, 32.0),
    "use_coordconv": (_bool, True),
    # training
    "iterations": (int, 2000),
    "lr": (float, 3e-3),
    "lambda_class": (float, 1.0),
    "lambda_reg": (float, 1.0),
    "lambda_pred": (float, 1.0),
    "lambda_scene": (float, 0.5),
    "schedule_warmup": (int, -1),        # -1 = scale from iterations
    "schedule_interval": (int, -1),
    "schedule_decay": (float, 0.1),
    "mining_ratio": (int, 3),
    "scene_mining": (_bool, True),
    "train_match_radius": (float, 2.0),
    "decode_score": (float, 0.5),
    "checkpoint": (str, "model.bevt"),
    "resume": (str, ""),
    "trace": (str, "trace.csv"),
    # evaluation
    "report": (str, "report.json"),
    "target_recall": (float, 0.9),
    "eval_match_radius": (float, 0.5),
    "suppress_fraction": (float, 0.0),
    "ablation": (str, "none"),
    "calibration_bins": (int, 10),
    "min_rmse_m": (int, 25),
    "baseline": (str, ""),
    "plots_dir": (str, ""),
    "render_frame": (int, 0),
    "render_prefix": (str, "render"),
}

PRESETS: dict = {
    "desk": {},
    # Full-scale constants as published: 0.2 m voxels over 80x80 m, ten
    # sweeps, wide four-block streams fused at 4x downsampling (one anchor
    # per 0.8 m), 64x64 actor grids at 0.5 m, vector messages of width 256.
    "paper-atg4d": {
        "area_x": 80.0,
        "area_y": 80.0,
        "ped_count_min": 8,
        "ped_count_max": 20,
        "scene_rows": 400,
        "scene_cols": 400,
        "scene_resolution": 0.2,
        "actor_rows": 64,
        "actor_cols": 64,
        "actor_resolution": 0.5,
        "n_sweep": 10,
        "depth_slabs": 5,
        "lidar_widths": (32, 64, 128, 256),
        "map_widths": (16, 32, 64, 128),
        "backbone_strides": (1, 2, 2, 1),
        "header_width": 256,
        "context_channels": 256,
        "det_head_width": 256,
        "emb_channels": 96,
        "vector_widths": (256, 256),
        "vector_stack": ((8, 4, 2), (8, 4, 0), (3, 1, 0)),
        "vector_dim": 256,
        "msg_channels": 256,
        "scene_channels": 256,
        "head_width": 256,
        "scene_head_width": 256,
        "scene_upsample": 2,
        "max_actors": 128,
        "iterations": 100000,
        "lr": 1.25e-5,
        "schedule_warmup": 10000,
        "schedule_interval": 5000,
        "target_recall": 0.7,
    },
}


class RunConfig:
    """Resolved configuration; attribute access per schema key."""

    def __init__(self, values: dict):
        unknown = set(values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config key "
                              f"'{sorted(unknown)[0]}'")
        self._values = {k: values.get(k, d) for k, (_, d) in SCHEMA.items()}

    def __getattr__(self, name: str):
        values = object.__getattribute__(self, "_values")
        if name in values:
            return values[name]
        raise AttributeError(name)

    def replace(self, **updates) -> "RunConfig":
        merged = dict(self._values)
        for key, value in updates.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = value
        return RunConfig(merged)

    def as_dict(self) -> dict:
        return dict(self._values)


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; '#' starts a comment; duplicates rejected."""
    pairs: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, "
                              f"got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {line_no}: unknown config key '{key}'")
        if key in pairs:
            raise ConfigError(f"line {line_no}: duplicate key '{key}'")
        parser, _ = SCHEMA[key]
        try:
            pairs[key] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {line_no}: bad value for '{key}': "
                              f"{exc}") from None
    preset = pairs.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}'")
    values = {k: d for k, (_, d) in SCHEMA.items()}
    values.update(PRESETS[preset])
    values.update(pairs)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


# ---------------------------------------------------------------------------
# Builders


def world_config(cfg: RunConfig) -> sim.WorldConfig:
    return sim.WorldConfig(
        area_x=cfg.area_x, area_y=cfg.area_y,
        ped_count_min=cfg.ped_count_min, ped_count_max=cfg.ped_count_max,
        points_min=cfg.points_min, points_max=cfg.points_max,
        dropout=cfg.dropout, seed=cfg.seed)


def dataset_plan(cfg: RunConfig) -> sim.DatasetPlan:
    return sim.DatasetPlan(
        n_frames=cfg.n_frames, n_sweep=cfg.n_sweep, horizon=cfg.horizon,
        label_dt=cfg.label_dt, frames_per_world=cfg.frames_per_world,
        map_grid=GridSpec(cfg.scene_rows, cfg.scene_cols,
                          cfg.scene_resolution))


def model_settings(cfg: RunConfig) -> ModelSettings:
    backbone = BackboneConfig(
        lidar_channels=cfg.lidar_widths, map_channels=cfg.map_widths,
        strides=cfg.backbone_strides, header_width=cfg.header_width,
        context_channels=cfg.context_channels)
    interaction = InteractionConfig(
        actor_rows=cfg.actor_rows, actor_cols=cfg.actor_cols,
        actor_resolution=cfg.actor_resolution,
        context_channels=cfg.context_channels,
        use_coordconv=cfg.use_coordconv,
        emb_channels=cfg.emb_channels, vector_widths=cfg.vector_widths,
        vector_stack=cfg.vector_stack, vector_dim=cfg.vector_dim,
        msg_channels=cfg.msg_channels, scene_channels=cfg.scene_channels,
        horizon=cfg.horizon, mp_rounds=cfg.mp_rounds, knn_k=cfg.knn_k,
        neighbor_radius=cfg.neighbor_radius, head_width=cfg.head_width,
        scene_head_width=cfg.scene_head_width,
        scene_upsample=cfg.scene_upsample)
    return ModelSettings(
        scene_rows=cfg.scene_rows, scene_cols=cfg.scene_cols,
        scene_resolution=cfg.scene_resolution, n_sweep=cfg.n_sweep,
        depth_slabs=cfg.depth_slabs, nms_radius=cfg.nms_radius,
        det_head_width=cfg.det_head_width, max_actors=cfg.max_actors,
        backbone=backbone, interaction=interaction)


def sampling_policy(cfg: RunConfig) -> ScheduledSamplingPolicy:
    if cfg.schedule_warmup < 0 or cfg.schedule_interval < 0:
        return ScheduledSamplingPolicy.scaled(cfg.iterations)
    return ScheduledSamplingPolicy(warmup=cfg.schedule_warmup,
                                   interval=cfg.schedule_interval,
                                   decay=cfg.schedule_decay)


def train_settings(cfg: RunConfig) -> TrainSettings:
    weights = LossWeights(class_weight=cfg.lambda_class,
                          reg_weight=cfg.lambda_reg,
                          pred_weight=cfg.lambda_pred,
                          scene_weight=cfg.lambda_scene)
    return TrainSettings(
        iterations=cfg.iterations, lr=cfg.lr, weights=weights,
        policy=sampling_policy(cfg), mining_ratio=cfg.mining_ratio,
        scene_mining=cfg.scene_mining, match_radius=cfg.train_match_radius,
        decode_score=cfg.decode_score, seed=cfg.seed)


def eval_settings(cfg: RunConfig) -> EvalSettings:
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation '{cfg.ablation}'")
    if not 0.0 <= cfg.suppress_fraction <= 1.0:
        raise ConfigError("suppress_fraction must be in [0, 1]")
    return EvalSettings(
        target_recall=cfg.target_recall,
        match_radius=cfg.eval_match_radius,
        suppress_fraction=cfg.suppress_fraction,
        ablation=cfg.ablation,
        calibration_bins=cfg.calibration_bins,
        min_rmse_m=cfg.min_rmse_m,
        threads=cfg.threads or None)

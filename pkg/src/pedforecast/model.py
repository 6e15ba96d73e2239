"""Full pipeline assembly and checkpoint IO.

Wires voxelized sweeps and the map raster through the backbone, the
detection head, the interaction graph, and the occupancy heads; prepares
dataset frames into training-ready tensors and computes per-frame losses.
"""
import os
from dataclasses import dataclass, field

import numpy as np

from .bevt import read_tensors, write_tensors
from .geometry import GridSpec, Pose2D
from .grid import GridTensor, NumericalError, Tape, slice_channels
from .interaction import (InteractionConfig, InteractionParams, aggregate_occupancy,
                          actor_head, build_graph, init_states,
                          make_interaction_params, resample_to_state_grid,
                          run_message_passing, scene_head, warp_pmf_to_scene)
from .learning import (AdamState, MotionLossStats, detection_class_loss,
                       detection_reg_loss, motion_nll_loss, scene_bce_loss)
from .parallel import parallel_map
from .perception import (BackboneConfig, BackboneParams, Detection,
                         DetectionHeadParams, backbone_forward, context_grid,
                         decode_anchors, detection_head_forward,
                         encode_anchor_targets, make_backbone,
                         make_detection_head, match_greedy, nms)
from .sim import MAP_LAYER_NAMES, read_dataset, read_map, resolve_map_path
from .voxelize import VoxelConfig, rasterize_disks, voxelize_sweeps

ABLATIONS = ("none", "no-s2a", "no-scene", "no-graph")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSettings:
    """Desk-scale defaults: 32 m scene at 0.5 m cells, 4x downsampled
    context, 16 m actor grids at 1 m cells, 10-step horizon."""

    scene_rows: int = 64
    scene_cols: int = 64
    scene_resolution: float = 0.5
    n_sweep: int = 3
    depth_slabs: int = 1
    slab_height: float = 0.2
    map_channels: int = len(MAP_LAYER_NAMES)
    ped_radius: float = 0.3
    nms_radius: float = 0.3
    det_head_width: int = 32
    max_actors: int = 32
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)

    def __post_init__(self) -> None:
        if self.backbone.context_channels != self.interaction.context_channels:
            raise ModelError("backbone context channels must match the "
                             "interaction stage")
        if self.scene_rows < 1 or self.scene_cols < 1 or self.scene_resolution <= 0:
            raise ModelError("bad scene grid")
        if self.ped_radius <= 0 or self.max_actors < 1:
            raise ModelError("bad actor bounds")
        f = self.backbone.total_stride
        up = 2 ** self.interaction.scene_upsample
        if f != up:
            raise ModelError(f"scene head upsampling x{up} must invert the "
                             f"backbone stride x{f}")

    @property
    def scene_grid(self) -> GridSpec:
        return GridSpec(self.scene_rows, self.scene_cols, self.scene_resolution)

    @property
    def horizon(self) -> int:
        return self.interaction.horizon


@dataclass
class ForecastModel:
    settings: ModelSettings
    scene_grid: GridSpec
    ctx_grid: GridSpec
    voxel: VoxelConfig
    backbone: BackboneParams
    det_head: DetectionHeadParams
    graph: InteractionParams

    def named_parameters(self) -> dict[str, GridTensor]:
        out = self.backbone.named_parameters()
        for part in (self.det_head, self.graph):
            for name, p in part.named_parameters().items():
                if name in out:
                    raise ModelError(f"duplicate parameter name {name}")
                out[name] = p
        return out


def make_model(rng, settings: ModelSettings | None = None) -> ForecastModel:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    s = settings or ModelSettings()
    scene_grid = s.scene_grid
    ctx_grid = context_grid(scene_grid, s.backbone)
    voxel = VoxelConfig(scene_grid, s.depth_slabs, s.n_sweep, s.slab_height)
    return ForecastModel(
        settings=s,
        scene_grid=scene_grid,
        ctx_grid=ctx_grid,
        voxel=voxel,
        backbone=make_backbone(rng, s.backbone, voxel.channels, s.map_channels),
        det_head=make_detection_head(rng, s.backbone.context_channels,
                                     s.det_head_width),
        graph=make_interaction_params(rng, s.interaction),
    )


# ---------------------------------------------------------------------------
# frame preparation


@dataclass(eq=False)
class PreparedFrame:
    frame_id: int
    bev: np.ndarray              # (n_sweep*slabs, H, W)
    map_raster: np.ndarray       # (map layers, H, W)
    gt_poses: list[Pose2D]       # pose at the detection time
    gt_xy: np.ndarray            # (N, 2)
    gt_futures: np.ndarray       # (N, T, 2) world positions
    positives: np.ndarray        # (h, w) anchor labels
    reg_targets: np.ndarray      # (4, h, w)
    occupancy: np.ndarray        # (T, H, W) binary


def _grids_equal(a: GridSpec, b: GridSpec) -> bool:
    return (a.rows == b.rows and a.cols == b.cols
            and a.resolution == b.resolution
            and a.origin_x == b.origin_x and a.origin_y == b.origin_y)


def prepare_frames(dataset_path, model: ForecastModel,
                   threads: int | None = None) -> list[PreparedFrame]:
    """Load a generated dataset and bake per-frame tensors and labels."""
    frames = read_dataset(dataset_path)
    if not frames:
        raise ModelError(f"{dataset_path}: dataset is empty")
    horizon = model.settings.horizon
    rasters: dict[str, np.ndarray] = {}
    for frame in frames:
        if frame.map_ref not in rasters:
            raster, grid = read_map(resolve_map_path(dataset_path, frame))
            if not _grids_equal(grid, model.scene_grid):
                raise ModelError(f"map grid of {frame.map_ref} does not match "
                                 "the model scene grid")
            if raster.shape[0] != model.settings.map_channels:
                raise ModelError(f"map raster has {raster.shape[0]} layers, "
                                 f"expected {model.settings.map_channels}")
            rasters[frame.map_ref] = raster

    def build(frame) -> PreparedFrame:
        if len(frame.sweeps) != model.voxel.n_sweep:
            raise ModelError(f"frame {frame.frame_id} has {len(frame.sweeps)} "
                             f"sweeps, model expects {model.voxel.n_sweep}")
        bev = voxelize_sweeps(frame.sweeps, model.voxel)
        n_past = frame.n_past
        poses, xy, futures = [], [], []
        for actor in frame.actors:
            if actor.poses.shape[0] < n_past + horizon:
                raise ModelError(f"frame {frame.frame_id} actor {actor.actor_id}"
                                 f" has too few pose rows for horizon {horizon}")
            x, y, heading = actor.poses[n_past - 1]
            poses.append(Pose2D(x, y, heading))
            xy.append((x, y))
            futures.append(actor.poses[n_past:n_past + horizon, :2])
        gt_array = np.array([[p.x, p.y, p.heading] for p in poses])
        positives, targets = encode_anchor_targets(gt_array, model.ctx_grid)
        future_arr = np.array(futures)     # (N, T, 2)
        occupancy = np.stack([
            rasterize_disks(future_arr[:, t, :], model.settings.ped_radius,
                            model.scene_grid)
            for t in range(horizon)])
        return PreparedFrame(frame.frame_id, bev.data,
                             rasters[frame.map_ref], poses,
                             np.array(xy), future_arr, positives, targets,
                             occupancy)

    return parallel_map(build, frames, threads)


# ---------------------------------------------------------------------------
# forward passes


def detect_frame(model: ForecastModel, frame: PreparedFrame,
                 min_score: float = 0.0, tape: Tape | None = None
                 ) -> tuple[list[Detection], GridTensor, GridTensor]:
    """Backbone + head + NMS; detections capped at the max_actors best."""
    bev = GridTensor(frame.bev)
    map_t = GridTensor(frame.map_raster)
    context = backbone_forward(bev, map_t, model.backbone, tape)
    head_out = detection_head_forward(context, model.det_head, tape)
    dets = nms(decode_anchors(head_out, model.ctx_grid, min_score),
               model.settings.nms_radius)
    if len(dets) > model.settings.max_actors:
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        keep = sorted(order[:model.settings.max_actors])
        dets = [dets[i] for i in keep]
    return dets, context, head_out


def _graph_forward(model: ForecastModel, context: GridTensor,
                   detections: list[Detection], tape: Tape | None,
                   rounds: int | None = None, use_scene: bool = True,
                   use_s2a: bool = True):
    """Interaction rounds plus both output heads.

    Returns (pmfs, warped pmfs, aggregated occupancy, scene forecast); the
    aggregation falls back to zeros when no actor survives detection.
    """
    cfg = model.settings.interaction
    graph = build_graph(detections, cfg.neighbor_radius, cfg.knn_k)
    actors, scene = init_states(context, model.ctx_grid, detections,
                                model.graph, tape)
    actors, scene = run_message_passing(actors, scene, graph, model.ctx_grid,
                                        model.graph, rounds, tape,
                                        use_scene=use_scene, use_s2a=use_s2a)
    pmfs = [actor_head(a.state, model.graph, tape) for a in actors]
    warped = [warp_pmf_to_scene(p, a.pose, cfg.actor_grid, model.scene_grid, tape)
              for p, a in zip(pmfs, actors)]
    if warped:
        p_agg = aggregate_occupancy(warped, tape)
    else:
        p_agg = GridTensor(np.zeros((cfg.horizon, model.scene_grid.rows,
                                     model.scene_grid.cols)))
    p_state = resample_to_state_grid(p_agg, model.scene_grid, model.ctx_grid, tape)
    forecast = scene_head(scene, p_state, model.graph, tape)
    return pmfs, warped, p_agg, forecast


@dataclass
class FrameLosses:
    class_term: GridTensor
    reg_term: GridTensor
    pred_term: GridTensor
    scene_term: GridTensor
    stats: MotionLossStats
    n_actors: int
    used_gt: bool


def frame_losses(model: ForecastModel, frame: PreparedFrame, settings,
                 tape: Tape, use_gt_poses: bool) -> FrameLosses:
    """All four loss terms for one frame on one tape.

    Detection losses always target the ground-truth anchor labels; the
    interaction stage consumes either GT poses or the model's own thresholded
    detections, per the scheduled-sampling coin.
    """
    if use_gt_poses:
        dets = [Detection(1.0, p.x, p.y, p.heading) for p in frame.gt_poses]
        bev = GridTensor(frame.bev)
        map_t = GridTensor(frame.map_raster)
        context = backbone_forward(bev, map_t, model.backbone, tape)
        head_out = detection_head_forward(context, model.det_head, tape)
        matches: list[int | None] = list(range(len(dets)))
    else:
        dets, context, head_out = detect_frame(model, frame,
                                               settings.decode_score, tape)
        matches = match_greedy(dets, frame.gt_xy, settings.match_radius)

    logits = slice_channels(head_out, 0, 1, tape)
    offsets = slice_channels(head_out, 1, 5, tape)
    class_term = detection_class_loss(logits, frame.positives[None],
                                      settings.mining_ratio, tape)
    reg_term = detection_reg_loss(offsets, frame.reg_targets, frame.positives,
                                  tape)

    pmfs, _, _, forecast = _graph_forward(model, context, dets, tape)
    scene_term = scene_bce_loss(forecast, frame.occupancy,
                                settings.mining_ratio, settings.scene_mining,
                                tape)

    sel = [(pmf, Pose2D(d.x, d.y, d.heading), frame.gt_futures[m])
           for pmf, d, m in zip(pmfs, dets, matches) if m is not None]
    pred_term, stats = motion_nll_loss(
        [s[0] for s in sel], [s[1] for s in sel], [s[2] for s in sel],
        model.settings.interaction.actor_grid, tape)
    return FrameLosses(class_term, reg_term, pred_term, scene_term, stats,
                       len(dets), use_gt_poses)


@dataclass(eq=False)
class FrameForecast:
    """Inference outputs for one frame, as plain arrays."""

    frame_id: int
    detections: list[Detection]
    pmfs: list[np.ndarray]       # (T, actor rows, actor cols) per detection
    scene: np.ndarray            # (T, H, W) occupancy forecast
    aggregation: np.ndarray      # (T, H, W) instance-aggregated occupancy


def forecast_frame(model: ForecastModel, frame: PreparedFrame,
                   detections: list[Detection], ablation: str = "none"
                   ) -> FrameForecast:
    """Run the interaction stage on the given detections, without a tape.

    Ablations: "no-s2a" drops scene feedback, "no-scene" drops the scene
    node entirely, "no-graph" runs zero message-passing rounds; the last
    two report the instance aggregation as the occupancy forecast.
    """
    if ablation not in ABLATIONS:
        raise ModelError(f"unknown ablation {ablation!r}; pick from {ABLATIONS}")
    bev = GridTensor(frame.bev)
    map_t = GridTensor(frame.map_raster)
    context = backbone_forward(bev, map_t, model.backbone)
    rounds = 0 if ablation == "no-graph" else None
    pmfs, _, p_agg, forecast = _graph_forward(
        model, context, detections, None, rounds,
        use_scene=ablation != "no-scene",
        use_s2a=ablation not in ("no-s2a", "no-scene"))
    scene = p_agg.data if ablation in ("no-scene", "no-graph") else forecast.data
    return FrameForecast(frame.frame_id, detections,
                         [p.data for p in pmfs], scene, p_agg.data)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ForecastModel, adam: AdamState,
                    iteration: int) -> None:
    params = model.named_parameters()
    entries: dict[str, np.ndarray] = {}
    for name in sorted(params):
        entries[f"param/{name}"] = params[name].data
    for name in sorted(adam.m):
        entries[f"adam/m/{name}"] = adam.m[name]
        entries[f"adam/v/{name}"] = adam.v[name]
    entries["meta/adam"] = np.array([adam.lr, adam.beta1, adam.beta2, adam.eps])
    entries["meta/step"] = np.asarray(float(adam.step))
    entries["meta/iteration"] = np.asarray(float(iteration))
    write_tensors(path, entries)


def load_checkpoint(path, model: ForecastModel) -> tuple[AdamState, int]:
    """Restore parameters in place; returns optimizer state + iteration."""
    tensors = read_tensors(path)
    params = model.named_parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise ModelError(f"{path}: missing checkpoint entry {key}")
        if tensors[key].shape != p.data.shape:
            raise ModelError(f"{path}: {key} has shape {tensors[key].shape}, "
                             f"model expects {p.data.shape}")
        if not np.all(np.isfinite(tensors[key])):
            raise NumericalError(f"{path}: {key} is not finite")
        p.data = tensors[key]
    hyper = tensors.get("meta/adam")
    if hyper is None or "meta/step" not in tensors or "meta/iteration" not in tensors:
        raise ModelError(f"{path}: missing checkpoint metadata")
    adam = AdamState(lr=float(hyper[0]), beta1=float(hyper[1]),
                     beta2=float(hyper[2]), eps=float(hyper[3]),
                     step=int(float(tensors["meta/step"])))
    for name in params:
        m_key, v_key = f"adam/m/{name}", f"adam/v/{name}"
        if m_key in tensors:
            if tensors[m_key].shape != params[name].data.shape:
                raise ModelError(f"{path}: {m_key} shape mismatch")
            adam.m[name] = tensors[m_key]
            adam.v[name] = tensors[v_key]
    extra = {k for k in tensors
             if k.startswith("param/") and k[len("param/"):] not in params}
    if extra:
        raise ModelError(f"{path}: unknown parameters {sorted(extra)[:3]}")
    return adam, int(float(tensors["meta/iteration"]))

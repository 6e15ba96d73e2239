"""Synthetic pedestrian worlds: dynamics, sweeps, maps, dataset files.

Pedestrians are disks moving in a flat rectangular area. Each one walks
toward a goal point and is pushed away from its neighbours and the area
walls by an exponentially decaying repulsion. The sensor sits at the
scene origin, so sweep points are already in the modelling frame.
"""
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .bevt import read_tensors, write_tensors
from .geometry import GridSpec
from .parallel import parallel_map


class SimulationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for one synthetic world."""

    area_x: float = 32.0
    area_y: float = 32.0
    ped_count_min: int = 3
    ped_count_max: int = 8
    speed_min: float = 0.4
    speed_max: float = 1.5
    goal_gain: float = 1.0
    repulsion_gain: float = 2.0
    repulsion_radius: float = 1.5
    group_probability: float = 0.2
    sweep_rate_hz: float = 10.0
    dropout: float = 0.05
    points_min: int = 8
    points_max: int = 25
    ped_radius: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.goal_gain < 0 or self.repulsion_gain < 0:
            raise SimulationError("gains must be non-negative")
        if self.repulsion_radius <= 0:
            raise SimulationError("repulsion radius must be positive")
        for p in (self.group_probability, self.dropout):
            if not 0.0 <= p <= 1.0:
                raise SimulationError(f"probability {p} outside [0, 1]")
        if self.ped_count_min < 0 or self.ped_count_max < self.ped_count_min:
            raise SimulationError("bad pedestrian count range")
        if self.speed_min <= 0 or self.speed_max < self.speed_min:
            raise SimulationError("bad speed range")
        if self.points_min < 0 or self.points_max < self.points_min:
            raise SimulationError("bad points-per-pedestrian range")
        if self.sweep_rate_hz <= 0:
            raise SimulationError("sweep rate must be positive")
        if self.ped_radius <= 0:
            raise SimulationError("pedestrian radius must be positive")

    @property
    def tick(self) -> float:
        return 1.0 / self.sweep_rate_hz


@dataclass
class PedestrianTrack:
    """Positions and headings for one pedestrian over a whole run."""

    actor_id: int
    positions: np.ndarray        # (steps, 2)
    headings: np.ndarray         # (steps,)
    speed: float

    @property
    def steps(self) -> int:
        return self.positions.shape[0]


def repulsion_forces(positions: np.ndarray, config: WorldConfig) -> np.ndarray:
    """Pairwise and wall repulsion accelerations, one (x, y) row per ped."""
    n = positions.shape[0]
    forces = np.zeros((n, 2))
    gain, radius = config.repulsion_gain, config.repulsion_radius
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            delta = positions[i] - positions[j]
            d = math.hypot(delta[0], delta[1])
            if d < 1e-9:
                continue
            forces[i] += gain * math.exp(-d / radius) * delta / d
    half_x, half_y = config.area_x / 2.0, config.area_y / 2.0
    for i in range(n):
        x, y = positions[i]
        forces[i, 0] += gain * math.exp(-(half_x - x) / radius)
        forces[i, 0] -= gain * math.exp(-(x + half_x) / radius)
        forces[i, 1] += gain * math.exp(-(half_y - y) / radius)
        forces[i, 1] -= gain * math.exp(-(y + half_y) / radius)
    return forces


def step_dynamics(positions: np.ndarray, goals: np.ndarray, speeds: np.ndarray,
                  config: WorldConfig, dt: float) -> np.ndarray:
    """One Euler step of goal attraction + repulsion with a speed clamp."""
    to_goal = goals - positions
    dist = np.linalg.norm(to_goal, axis=1, keepdims=True)
    direction = np.where(dist > 1e-9, to_goal / np.maximum(dist, 1e-9), 0.0)
    velocity = config.goal_gain * speeds[:, None] * direction
    velocity = velocity + repulsion_forces(positions, config)
    norms = np.linalg.norm(velocity, axis=1)
    over = norms > speeds
    scale = np.where(over, speeds / np.maximum(norms, 1e-12), 1.0)
    velocity = velocity * scale[:, None]
    out = positions + velocity * dt
    half_x, half_y = config.area_x / 2.0, config.area_y / 2.0
    out[:, 0] = np.clip(out[:, 0], -half_x, half_x)
    out[:, 1] = np.clip(out[:, 1], -half_y, half_y)
    return out


def simulate_world(config: WorldConfig, duration_steps: int) -> list[PedestrianTrack]:
    """Roll pedestrian dynamics forward; deterministic for a given seed."""
    if config.area_x <= 0 or config.area_y <= 0:
        raise SimulationError("world area must be positive")
    if duration_steps < 1:
        raise SimulationError("duration must be at least one step")
    rng = np.random.default_rng(config.seed)
    n = int(rng.integers(config.ped_count_min, config.ped_count_max + 1))
    if n == 0:
        return []

    half = np.array([config.area_x / 2.0 - 1.0, config.area_y / 2.0 - 1.0])
    half = np.maximum(half, 0.1)
    positions = rng.uniform(-half, half, size=(n, 2))
    goals = rng.uniform(-half, half, size=(n, 2))
    speeds = rng.uniform(config.speed_min, config.speed_max, size=n)
    for i in range(1, n):
        if rng.random() < config.group_probability:
            # walking together: share the neighbour's goal and pace
            goals[i] = goals[i - 1] + rng.normal(0.0, 0.4, size=2)
            speeds[i] = speeds[i - 1]

    dt = config.tick
    pos_hist = np.empty((duration_steps, n, 2))
    head_hist = np.empty((duration_steps, n))
    heading = rng.uniform(-math.pi, math.pi, size=n)
    for step in range(duration_steps):
        pos_hist[step] = positions
        head_hist[step] = heading
        new_positions = step_dynamics(positions, goals, speeds, config, dt)
        moved = new_positions - positions
        dist = np.linalg.norm(moved, axis=1)
        update = dist > 1e-6
        heading = np.where(update, np.arctan2(moved[:, 1], moved[:, 0]), heading)
        positions = new_positions
        reached = np.linalg.norm(goals - positions, axis=1) < 0.5
        for i in np.flatnonzero(reached):
            goals[i] = rng.uniform(-half, half, size=2)

    return [PedestrianTrack(i, pos_hist[:, i].copy(), head_hist[:, i].copy(),
                            float(speeds[i])) for i in range(n)]


def synthesize_sweeps(tracks: list[PedestrianTrack], frame_step: int,
                      config: WorldConfig, n_sweep: int, seed,
                      suppress_ids: frozenset = frozenset()) -> list[np.ndarray]:
    """Point sets for the n_sweep steps ending at frame_step, oldest first.

    Each pedestrian sheds a random number of points sampled uniformly on
    its disk; each point then survives an independent dropout draw. The
    third column holds the sweep timestamp. Actors in suppress_ids emit
    nothing, which lets callers manufacture false negatives.
    """
    first = frame_step - (n_sweep - 1)
    if first < 0:
        raise SimulationError(f"frame step {frame_step} has fewer than "
                              f"{n_sweep} past steps")
    for track in tracks:
        if frame_step >= track.steps:
            raise SimulationError(f"frame step {frame_step} beyond track end")
    rng = np.random.default_rng(seed)
    dt = config.tick
    sweeps = []
    for step in range(first, frame_step + 1):
        t = step * dt
        chunks = [np.zeros((0, 3))]
        for track in tracks:
            if track.actor_id in suppress_ids:
                continue
            count = int(rng.integers(config.points_min, config.points_max + 1))
            radii = config.ped_radius * np.sqrt(rng.random(count))
            angle = rng.uniform(0.0, 2.0 * math.pi, size=count)
            pts = track.positions[step] + np.stack(
                [radii * np.cos(angle), radii * np.sin(angle)], axis=1)
            keep = rng.random(count) >= config.dropout
            pts = pts[keep]
            chunks.append(np.column_stack([pts, np.full(len(pts), t)]))
        sweeps.append(np.concatenate(chunks, axis=0))
    return sweeps


# ---------------------------------------------------------------------------
# maps


def _rect(x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


MAP_LAYER_NAMES = ("road", "sidewalk", "crosswalk", "intersection")


def generate_map_layers(config: WorldConfig, rng) -> list[list[np.ndarray]]:
    """Rectangle layers: road, sidewalk, crosswalk, intersection."""
    hx, hy = config.area_x / 2.0, config.area_y / 2.0
    yc = rng.uniform(-0.25 * hy, 0.25 * hy)
    road_w = rng.uniform(5.0, 9.0) / 2.0
    xc = rng.uniform(-0.25 * hx, 0.25 * hx)
    cross_road_w = rng.uniform(5.0, 9.0) / 2.0
    walk_w = rng.uniform(1.5, 3.0)

    road = [_rect(-hx, yc - road_w, hx, yc + road_w),
            _rect(xc - cross_road_w, -hy, xc + cross_road_w, hy)]
    sidewalk = [_rect(-hx, yc + road_w, hx, yc + road_w + walk_w),
                _rect(-hx, yc - road_w - walk_w, hx, yc - road_w)]
    cw_x = rng.uniform(-0.6 * hx, 0.6 * hx)
    cw_w = rng.uniform(0.75, 1.5)
    crosswalk = [_rect(cw_x - cw_w, yc - road_w, cw_x + cw_w, yc + road_w)]
    intersection = [_rect(xc - cross_road_w, yc - road_w,
                          xc + cross_road_w, yc + road_w)]
    return [road, sidewalk, crosswalk, intersection]


def write_map(path, raster: np.ndarray, grid: GridSpec) -> None:
    write_tensors(path, {
        "layers": raster,
        "grid": np.array([grid.rows, grid.cols, grid.resolution,
                          grid.origin_x, grid.origin_y]),
    })


def read_map(path) -> tuple[np.ndarray, GridSpec]:
    tensors = read_tensors(path)
    try:
        raster = tensors["layers"]
        g = tensors["grid"]
    except KeyError as exc:
        raise DatasetError(f"{path}: missing map entry {exc}") from exc
    grid = GridSpec(int(g[0]), int(g[1]), float(g[2]), float(g[3]), float(g[4]))
    return raster, grid


# ---------------------------------------------------------------------------
# dataset records


@dataclass(eq=False)
class ActorPoses:
    """One actor's timestamped poses, past then future, oldest first."""

    actor_id: int
    times: np.ndarray            # (P,)
    poses: np.ndarray            # (P, 3): x, y, heading

    def __eq__(self, other) -> bool:
        return (isinstance(other, ActorPoses)
                and self.actor_id == other.actor_id
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.poses, other.poses))


@dataclass(eq=False)
class FrameRecord:
    """One dataset frame: map reference, past sweeps, actor labels."""

    frame_id: int
    map_ref: str
    sweeps: list[np.ndarray]     # each (k, 3): x, y, t; oldest first
    actors: list[ActorPoses]

    @property
    def n_past(self) -> int:
        return len(self.sweeps)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FrameRecord)
                and self.frame_id == other.frame_id
                and self.map_ref == other.map_ref
                and len(self.sweeps) == len(other.sweeps)
                and all(np.array_equal(a, b)
                        for a, b in zip(self.sweeps, other.sweeps))
                and self.actors == other.actors)


def _frame_to_json(frame: FrameRecord) -> str:
    return json.dumps({
        "frame_id": frame.frame_id,
        "map": frame.map_ref,
        "sweeps": [[{"x": float(x), "y": float(y), "t": float(t)}
                    for x, y, t in sweep] for sweep in frame.sweeps],
        "actors": [{"id": actor.actor_id,
                    "poses": [{"t": float(t), "x": float(p[0]),
                               "y": float(p[1]), "heading": float(p[2])}
                              for t, p in zip(actor.times, actor.poses)]}
                   for actor in frame.actors],
    }, separators=(",", ":"))


def _frame_from_json(obj: dict) -> FrameRecord:
    sweeps = [np.array([[p["x"], p["y"], p["t"]] for p in sweep]).reshape(-1, 3)
              for sweep in obj["sweeps"]]
    actors = [ActorPoses(int(a["id"]),
                         np.array([p["t"] for p in a["poses"]]),
                         np.array([[p["x"], p["y"], p["heading"]]
                                   for p in a["poses"]]).reshape(-1, 3))
              for a in obj["actors"]]
    return FrameRecord(int(obj["frame_id"]), str(obj["map"]), sweeps, actors)


def write_dataset(frames: list[FrameRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(_frame_to_json(frame))
            fh.write("\n")


def read_dataset(path) -> list[FrameRecord]:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                frames.append(_frame_from_json(obj))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: malformed frame on line {lineno}: "
                                   f"{exc}") from exc
    return frames


def resolve_map_path(dataset_path, frame: FrameRecord) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(dataset_path)),
                        frame.map_ref)


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class DatasetPlan:
    """How many frames to cut from how many worlds, and label timing."""

    n_frames: int
    n_sweep: int = 3
    horizon: int = 10
    label_dt: float = 0.5
    frames_per_world: int = 10
    map_grid: GridSpec = field(default_factory=lambda: GridSpec(64, 64, 0.5))

    def __post_init__(self) -> None:
        if self.n_frames < 1 or self.n_sweep < 1 or self.horizon < 1:
            raise SimulationError("frame count, sweeps and horizon must be >= 1")
        if self.label_dt <= 0 or self.frames_per_world < 1:
            raise SimulationError("bad label spacing or frames per world")


def _label_stride(plan: DatasetPlan, config: WorldConfig) -> int:
    stride = round(plan.label_dt * config.sweep_rate_hz)
    if stride < 1 or abs(stride - plan.label_dt * config.sweep_rate_hz) > 1e-9:
        raise SimulationError("label_dt must be a whole number of ticks")
    return stride


def generate_dataset(config: WorldConfig, plan: DatasetPlan, out_dir,
                     threads: int | None = None) -> str:
    """Simulate worlds, cut frames, write maps + frames.jsonl; returns path."""
    from .voxelize import rasterize_map

    os.makedirs(out_dir, exist_ok=True)
    stride = _label_stride(plan, config)
    n_worlds = -(-plan.n_frames // plan.frames_per_world)
    duration = (plan.n_sweep - 1) + (plan.frames_per_world - 1) * stride \
        + plan.horizon * stride + 1

    def build_world(w: int) -> list[FrameRecord]:
        world_cfg = dataclasses.replace(config, seed=[config.seed, 1 + w])
        world_rng = np.random.default_rng([config.seed, 1 + w, 0])
        tracks = simulate_world(world_cfg, duration)
        layers = generate_map_layers(config, world_rng)
        raster = rasterize_map(layers, plan.map_grid)
        map_name = f"map_{w}.bevt"
        write_map(os.path.join(out_dir, map_name), raster.data, plan.map_grid)

        frames = []
        remaining = plan.n_frames - w * plan.frames_per_world
        for k in range(min(plan.frames_per_world, remaining)):
            frame_id = w * plan.frames_per_world + k
            step = (plan.n_sweep - 1) + k * stride
            sweeps = synthesize_sweeps(tracks, step, config, plan.n_sweep,
                                       seed=[config.seed, 1 + w, 1 + k])
            actors = []
            for track in tracks:
                steps = list(range(step - plan.n_sweep + 1, step + 1)) + \
                    [step + (j + 1) * stride for j in range(plan.horizon)]
                times = np.array([s * config.tick for s in steps])
                poses = np.column_stack([track.positions[steps],
                                         track.headings[steps]])
                actors.append(ActorPoses(track.actor_id, times, poses))
            frames.append(FrameRecord(frame_id, map_name, sweeps, actors))
        return frames

    world_frames = parallel_map(build_world, range(n_worlds), threads)
    frames = [f for frames in world_frames for f in frames]
    dataset_path = os.path.join(out_dir, "frames.jsonl")
    write_dataset(frames, dataset_path)
    return dataset_path

"""Adapters that turn external forecaster outputs into grid pmfs.

Baselines report per-timestep bivariate Gaussians, Gaussian mixtures, or
raw trajectory samples. Each parameterization is integrated onto the same
spatial grids the model uses so the two sides share one evaluation path.
Cell mass is the mean density over a subsample lattice inside the cell
times the cell area; mass falling outside the grid is reported separately
and the pmf is left unnormalized unless asked otherwise.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec, Pose2D, cell_centers, pose_to_world, relative_transform
from .grid import GridTensor
from .interaction import aggregate_occupancy, warp_pmf_to_scene
from .perception import Detection


class AdapterError(ValueError):
    pass


BANDWIDTH_FLOOR = 0.1


# ---------------------------------------------------------------------------
# Gaussian cell integration


def _check_spd(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2):
        raise AdapterError("covariance must be 2x2")
    if not np.allclose(cov, cov.T, atol=1e-9):
        raise AdapterError("covariance must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise AdapterError("covariance must be positive definite") from None
    return 0.5 * (cov + cov.T)


def _subsample_points(grid: GridSpec, per_cell: int) -> np.ndarray:
    """World coordinates of the s*s subsample lattice, (rows, cols, s*s, 2)."""
    res = grid.resolution
    offs = (np.arange(per_cell) + 0.5) / per_cell - 0.5
    ox, oy = np.meshgrid(offs * res, offs * res)
    delta = np.column_stack([ox.ravel(), oy.ravel()])
    return cell_centers(grid)[:, :, None, :] + delta[None, None, :, :]


def _gaussian_cell_mass(mean, cov, grid: GridSpec, per_cell: int) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    cov = _check_spd(cov)
    points = _subsample_points(grid, per_cell)
    diff = points - mean
    inv = np.linalg.inv(cov)
    quad = np.einsum("...i,ij,...j->...", diff, inv, diff)
    norm = 1.0 / (2.0 * math.pi * math.sqrt(np.linalg.det(cov)))
    pdf = norm * np.exp(-0.5 * quad)
    return pdf.mean(axis=2) * grid.resolution ** 2


@dataclass
class PmfResult:
    pmf: np.ndarray        # (T, rows, cols)
    outside: np.ndarray    # (T,) mass the grid failed to capture


def _finish(masses: list[np.ndarray], renormalize: bool) -> PmfResult:
    pmf = np.stack(masses)
    outside = 1.0 - pmf.sum(axis=(1, 2))
    if renormalize:
        totals = pmf.sum(axis=(1, 2), keepdims=True)
        pmf = np.where(totals > 0, pmf / np.maximum(totals, 1e-300), pmf)
    return PmfResult(pmf, outside)


def gaussian_to_pmf(means, covs, grid: GridSpec, subsamples_per_cell: int = 4,
                    renormalize: bool = False) -> PmfResult:
    """Integrate per-timestep bivariate Gaussians onto the grid.

    means: (T, 2); covs: (T, 2, 2). Each cell gets the mean pdf over an
    s*s subsample lattice times the cell area.
    """
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    if means.ndim != 2 or means.shape[1] != 2 or len(means) != len(covs):
        raise AdapterError("means must be (T, 2) matching covs")
    if subsamples_per_cell < 1:
        raise AdapterError("subsamples_per_cell must be >= 1")
    masses = [_gaussian_cell_mass(m, c, grid, subsamples_per_cell)
              for m, c in zip(means, covs)]
    return _finish(masses, renormalize)


def mixture_to_pmf(steps, grid: GridSpec, subsamples_per_cell: int = 4,
                   renormalize: bool = False) -> PmfResult:
    """Weighted sum of component Gaussian pmfs, one mixture per timestep.

    steps: list over time of [(weight, mean, cov), ...].
    """
    masses = []
    for comps in steps:
        if not comps:
            raise AdapterError("mixture step needs at least one component")
        weights = np.array([w for w, _, _ in comps], dtype=np.float64)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise AdapterError("mixture weights must be >= 0 and sum to 1")
        total = np.zeros(grid.shape)
        for w, mean, cov in comps:
            total += w * _gaussian_cell_mass(mean, cov, grid,
                                             subsamples_per_cell)
        masses.append(total)
    return _finish(masses, renormalize)


# ---------------------------------------------------------------------------
# KDE on trajectory samples


def scott_bandwidth(samples: np.ndarray) -> float:
    """Isotropic Scott bandwidth with a floor for degenerate sample sets."""
    n = len(samples)
    if n < 2:
        return BANDWIDTH_FLOOR
    sigma = math.sqrt(samples.var(axis=0, ddof=1).mean())
    return max(sigma * n ** (-1.0 / 6.0), BANDWIDTH_FLOOR)


def kde_to_pmf(step_samples, grid: GridSpec, subsamples_per_cell: int = 4,
               bandwidth: float | None = None,
               renormalize: bool = False) -> PmfResult:
    """KDE each timestep's samples with isotropic Gaussian kernels.

    step_samples: list over time of (n, 2) arrays. bandwidth None applies
    Scott's rule per timestep.
    """
    steps = []
    for raw in step_samples:
        pts = np.asarray(raw, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] != 2:
            raise AdapterError("each timestep needs a nonempty (n, 2) array")
        h = scott_bandwidth(pts) if bandwidth is None else bandwidth
        if h <= 0:
            raise AdapterError("bandwidth must be positive")
        cov = h * h * np.eye(2)
        w = 1.0 / len(pts)
        steps.append([(w, p, cov) for p in pts])
    return mixture_to_pmf(steps, grid, subsamples_per_cell, renormalize)


# ---------------------------------------------------------------------------
# Scene aggregation from per-actor pmfs


def instances_to_scene(pmfs: list[np.ndarray], poses: list[Pose2D],
                       actor_grid: GridSpec,
                       scene_grid: GridSpec) -> np.ndarray:
    """Union of per-actor pmfs warped onto the scene grid.

    Shares the model's warp and complement-product machinery so baseline
    scene occupancy is produced exactly like the model's aggregation.
    """
    if len(pmfs) != len(poses):
        raise AdapterError("one pose per actor pmf required")
    if not pmfs:
        return np.zeros((0,) + scene_grid.shape)
    warped = [warp_pmf_to_scene(GridTensor(np.asarray(p, dtype=np.float64)),
                                pose, actor_grid, scene_grid)
              for p, pose in zip(pmfs, poses)]
    return aggregate_occupancy(warped).data


# ---------------------------------------------------------------------------
# Synthetic constant-velocity baseline


@dataclass
class CvSettings:
    speed: float = 1.0            # nominal walking speed, m/s
    dt: float = 0.5               # forecast step, s
    sigma0: float = 0.3           # position noise at t=0, m
    sigma_growth: float = 0.4     # extra std per forecast second, m


def constant_velocity_gaussians(det: Detection, horizon: int,
                                settings: CvSettings | None = None):
    """Per-timestep (means, covs) for one detection, world frame."""
    s = settings or CvSettings()
    heading = np.array([math.cos(det.heading), math.sin(det.heading)])
    times = (np.arange(horizon) + 1) * s.dt
    means = np.array([det.x, det.y]) + times[:, None] * s.speed * heading
    sig = s.sigma0 + s.sigma_growth * times
    covs = sig[:, None, None] ** 2 * np.eye(2)
    return means, covs


def cv_baseline_records(frame_id: int, dets: list[Detection], horizon: int,
                        settings: CvSettings | None = None) -> list[dict]:
    records = []
    for idx, det in enumerate(dets):
        means, covs = constant_velocity_gaussians(det, horizon, settings)
        records.append({
            "frame_id": frame_id,
            "actor": idx,
            "kind": "gaussian",
            "pose": [det.x, det.y, det.heading],
            "steps": [{"mean": list(m), "cov": [list(r) for r in c]}
                      for m, c in zip(means, covs)],
        })
    return records


# ---------------------------------------------------------------------------
# Baseline forecast file IO and record rasterization


_KINDS = ("gaussian", "mixture", "samples")


def write_baseline_jsonl(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_baseline_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AdapterError(f"line {line_no}: bad JSON ({exc})") from None
            for key in ("frame_id", "actor", "kind", "steps"):
                if key not in rec:
                    raise AdapterError(f"line {line_no}: missing '{key}'")
            if rec["kind"] not in _KINDS:
                raise AdapterError(f"line {line_no}: unknown kind "
                                   f"'{rec['kind']}'")
            records.append(rec)
    return records


def _to_local(points: np.ndarray, pose: Pose2D) -> np.ndarray:
    return relative_transform(Pose2D(0.0, 0.0, 0.0), pose).apply(points)


def _rotate_cov(cov: np.ndarray, heading: float) -> np.ndarray:
    c, s = math.cos(-heading), math.sin(-heading)
    rot = np.array([[c, -s], [s, c]])
    return rot @ cov @ rot.T


def record_to_pmf(record: dict, grid: GridSpec,
                  subsamples_per_cell: int = 4,
                  renormalize: bool = False) -> PmfResult:
    """Rasterize one baseline record onto the actor grid at its pose.

    Steps are stated in world coordinates; the record's pose centers and
    orients the grid, matching how the model's actor pmfs are laid out.
    """
    pose = Pose2D(*record.get("pose", (0.0, 0.0, 0.0)))
    kind = record["kind"]
    steps = record["steps"]
    if not steps:
        raise AdapterError("record has no steps")
    if kind == "gaussian":
        means = _to_local(np.array([s["mean"] for s in steps], dtype=float),
                          pose)
        covs = np.array([_rotate_cov(np.asarray(s["cov"], dtype=float),
                                     pose.heading) for s in steps])
        return gaussian_to_pmf(means, covs, grid, subsamples_per_cell,
                               renormalize)
    if kind == "mixture":
        local_steps = []
        for s in steps:
            comps = []
            for comp in s["components"]:
                mean = _to_local(np.asarray(comp["mean"], dtype=float)[None],
                                 pose)[0]
                cov = _rotate_cov(np.asarray(comp["cov"], dtype=float),
                                  pose.heading)
                comps.append((float(comp["weight"]), mean, cov))
            local_steps.append(comps)
        return mixture_to_pmf(local_steps, grid, subsamples_per_cell,
                              renormalize)
    if kind == "samples":
        local = [_to_local(np.asarray(s["points"], dtype=float), pose)
                 for s in steps]
        return kde_to_pmf(local, grid, subsamples_per_cell,
                          renormalize=renormalize)
    raise AdapterError(f"unknown kind '{kind}'")


def records_to_scene(records: list[dict], actor_grid: GridSpec,
                     scene_grid: GridSpec, subsamples_per_cell: int = 4):
    """Scene occupancy forecast from one frame's baseline records."""
    pmfs, poses = [], []
    for rec in records:
        pmfs.append(record_to_pmf(rec, actor_grid, subsamples_per_cell,
                                  renormalize=True).pmf)
        poses.append(Pose2D(*rec.get("pose", (0.0, 0.0, 0.0))))
    if not pmfs:
        raise AdapterError("no records for this frame")
    return instances_to_scene(pmfs, poses, actor_grid, scene_grid)

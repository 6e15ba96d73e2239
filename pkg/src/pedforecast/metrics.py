"""Evaluation metrics and the report pipeline.

Scene occupancy quality is scored with pooled per-timestep PR curves and
their average precision, plus reliability binning; actor motion with NLL
and an RMSE family at the final timestep, restricted to true-positive
detections at a common recall operating point.
"""
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec, Pose2D, cell_centers
from .learning import world_to_actor_cell
from .model import ForecastModel, FrameForecast, PreparedFrame, detect_frame, forecast_frame
from .parallel import parallel_map
from .perception import Detection, match_greedy

REPORT_KEYS = ("avg_map", "final_map", "ace", "mce", "nll", "expected_rmse",
               "argmax_rmse", "min_rmse_25")


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene occupancy: PR / AP


@dataclass
class PRCurve:
    thresholds: np.ndarray       # descending distinct scores
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    has_positives: bool


def pr_curve(probs: np.ndarray, labels: np.ndarray) -> PRCurve:
    """PR points at every distinct score, descending; ties grouped."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise MetricError("probs and labels must have equal length")
    if p.size == 0:
        raise MetricError("empty prediction set")
    if set(np.unique(y)) - {0.0, 1.0}:
        raise MetricError("labels must be binary")
    n_pos = y.sum()
    if n_pos == 0:
        return PRCurve(np.array([]), np.array([]), np.array([]), 0.0, False)
    order = np.argsort(-p, kind="stable")
    sorted_p = p[order]
    sorted_y = y[order]
    tp = np.cumsum(sorted_y)
    ranks = np.arange(1, p.size + 1)
    # evaluate only at the last index of each tied score block
    last = np.flatnonzero(np.diff(sorted_p, append=-np.inf) != 0)
    precision = tp[last] / ranks[last]
    recall = tp[last] / n_pos
    return PRCurve(sorted_p[last], precision, recall,
                   _envelope_ap(precision, recall), True)


def _envelope_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the precision envelope (all-points interpolation)."""
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * env).sum())


def occupancy_ap(probs: np.ndarray, labels: np.ndarray) -> tuple[float, bool]:
    """AP plus a flag that is False when the label set has no positives."""
    curve = pr_curve(probs, labels)
    return curve.ap, curve.has_positives


def avg_and_final_map(per_step_probs: list[np.ndarray],
                      per_step_labels: list[np.ndarray]
                      ) -> tuple[float, float, list[bool]]:
    """Mean per-timestep AP and the last timestep's AP, over pooled pixels."""
    if len(per_step_probs) != len(per_step_labels) or not per_step_probs:
        raise MetricError("need one pixel pool per timestep")
    aps, flags = [], []
    for probs, labels in zip(per_step_probs, per_step_labels):
        ap, ok = occupancy_ap(probs, labels)
        aps.append(ap)
        flags.append(ok)
    return float(np.mean(aps)), aps[-1], flags


# ---------------------------------------------------------------------------
# calibration


@dataclass
class ReliabilityReport:
    edges: np.ndarray            # (bins + 1,)
    mean_confidence: np.ndarray  # (bins,), NaN where empty
    accuracy: np.ndarray         # (bins,), NaN where empty
    count: np.ndarray            # (bins,)
    ace: float
    mce: float

    @property
    def empty_bins(self) -> list[int]:
        return [i for i, c in enumerate(self.count) if c == 0]


def reliability(probs: np.ndarray, labels: np.ndarray,
                bins: int = 10) -> ReliabilityReport:
    """Equal-width confidence binning; ACE/MCE over non-empty bins."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape or p.size == 0:
        raise MetricError("probs and labels must be equal-length and nonempty")
    if np.any(p < 0) or np.any(p > 1):
        raise MetricError("confidences must lie in [0, 1]")
    if bins < 1:
        raise MetricError("need at least one bin")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((p * bins).astype(np.int64), bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    conf = np.full(bins, np.nan)
    acc = np.full(bins, np.nan)
    gaps = []
    for b in range(bins):
        if count[b] == 0:
            continue
        mask = idx == b
        conf[b] = p[mask].mean()
        acc[b] = y[mask].mean()
        gaps.append(abs(conf[b] - acc[b]))
    if not gaps:
        raise MetricError("all calibration bins are empty")
    return ReliabilityReport(edges, conf, acc, count,
                             float(np.mean(gaps)), float(np.max(gaps)))


# ---------------------------------------------------------------------------
# actor motion metrics (single pmf, actor frame)


def motion_nll(pmf: np.ndarray, grid: GridSpec, pose: Pose2D,
               gt_xy: np.ndarray, floor: float = 1e-12) -> float | None:
    """NLL of the GT cell; None when the GT leaves the actor grid."""
    cell = world_to_actor_cell(grid, pose, np.asarray(gt_xy, dtype=np.float64))
    if cell is None:
        return None
    return float(-math.log(max(pmf[cell[0], cell[1]], floor)))


def _local_gt(grid: GridSpec, pose: Pose2D, gt_xy) -> np.ndarray:
    dx = gt_xy[0] - pose.x
    dy = gt_xy[1] - pose.y
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def expected_rmse(pmf: np.ndarray, grid: GridSpec, pose: Pose2D,
                  gt_xy: np.ndarray) -> float:
    """Probability-weighted distance from each cell center to the GT."""
    _check_pmf(pmf, grid)
    local = _local_gt(grid, pose, gt_xy)
    centers = cell_centers(grid)
    dist = np.hypot(centers[..., 0] - local[0], centers[..., 1] - local[1])
    return float((pmf * dist).sum())


def argmax_rmse(pmf: np.ndarray, grid: GridSpec, pose: Pose2D,
                gt_xy: np.ndarray) -> float:
    return min_rmse_at_m(pmf, grid, pose, gt_xy, m=1)


def min_rmse_at_m(pmf: np.ndarray, grid: GridSpec, pose: Pose2D,
                  gt_xy: np.ndarray, m: int = 25) -> float:
    """Smallest GT distance among the m most likely cells.

    Probability ties resolve to the lowest linear index, which makes m = 1
    the argmax metric exactly.
    """
    _check_pmf(pmf, grid)
    if m < 1:
        raise MetricError("m must be >= 1")
    local = _local_gt(grid, pose, gt_xy)
    flat = pmf.ravel()
    top = np.argsort(-flat, kind="stable")[:min(m, flat.size)]
    centers = cell_centers(grid).reshape(-1, 2)
    dist = np.hypot(centers[top, 0] - local[0], centers[top, 1] - local[1])
    return float(dist.min())


def _check_pmf(pmf: np.ndarray, grid: GridSpec) -> None:
    if pmf.shape != (grid.rows, grid.cols):
        raise MetricError(f"pmf shape {pmf.shape} does not match the grid")
    if abs(pmf.sum() - 1.0) > 1e-6 or np.any(pmf < 0):
        raise MetricError("pmf must be normalized and non-negative")


def match_true_positives(dets: list[Detection], gt_xy: np.ndarray,
                         radius: float = 0.5) -> list[int | None]:
    """Greedy association, shared with the detector stage."""
    return match_greedy(dets, gt_xy, radius)


# ---------------------------------------------------------------------------
# common recall threshold over a frame set


def common_recall_threshold(per_frame_dets: list[list[Detection]],
                            per_frame_gt: list[np.ndarray],
                            target_recall: float, match_radius: float
                            ) -> tuple[float, float, bool]:
    """Score threshold achieving the target recall over pooled frames.

    Greedy matching has the prefix property in score order, so one matching
    pass per frame gives every threshold's recall.
    """
    if not 0 < target_recall <= 1:
        raise MetricError("target recall must be in (0, 1]")
    matched_scores = []
    n_gt = 0
    all_scores = []
    for dets, gt in zip(per_frame_dets, per_frame_gt):
        n_gt += len(gt)
        all_scores.extend(d.score for d in dets)
        for det, m in zip(dets, match_greedy(dets, gt, match_radius)):
            if m is not None:
                matched_scores.append(det.score)
    if n_gt == 0 or not all_scores:
        return (min(all_scores) if all_scores else 0.0, 0.0, False)
    needed = math.ceil(target_recall * n_gt)
    matched_scores.sort(reverse=True)
    if needed > len(matched_scores):
        return min(all_scores), len(matched_scores) / n_gt, False
    threshold = matched_scores[needed - 1]
    achieved = sum(1 for s in matched_scores if s >= threshold) / n_gt
    return threshold, achieved, True


# ---------------------------------------------------------------------------
# detection suppression hook


def suppression_ranks(n: int, frame_id: int) -> list[int]:
    """Detection indices ordered by a frame-seeded integer hash."""
    mask = (1 << 32) - 1

    def key(idx: int) -> int:
        h = ((idx + 1) * 2654435761 ^ (frame_id + 1) * 40503) & mask
        # avalanche so the frame id reorders, not just perturbs, the ranks
        h = ((h ^ (h >> 16)) * 0x45D9F3B) & mask
        h = ((h ^ (h >> 16)) * 0x45D9F3B) & mask
        return h ^ (h >> 16)

    return sorted(range(n), key=lambda i: (key(i), i), reverse=True)


def suppress_detections(dets: list[Detection], frame_id: int,
                        fraction: float) -> tuple[list[Detection], list[int]]:
    """Drop the top-fraction of detections by index hash.

    Returns the survivors plus the dropped original indices; rounding is
    half-up so fraction 0.2 of 3 detections drops one.
    """
    if not 0 <= fraction <= 1:
        raise MetricError("suppression fraction must be in [0, 1]")
    k = int(fraction * len(dets) + 0.5)
    if k == 0:
        return list(dets), []
    dropped = sorted(suppression_ranks(len(dets), frame_id)[:k])
    dropped_set = set(dropped)
    kept = [d for i, d in enumerate(dets) if i not in dropped_set]
    return kept, dropped


# ---------------------------------------------------------------------------
# evaluation driver


@dataclass(frozen=True)
class EvalSettings:
    target_recall: float = 0.9
    match_radius: float = 0.5
    suppress_fraction: float = 0.0
    ablation: str = "none"
    calibration_bins: int = 10
    min_rmse_m: int = 25
    threads: int | None = None


@dataclass
class EvalReport:
    metrics: dict
    diagnostics: dict
    forecasts: list | None = None    # kept only on request, never serialized

    def to_json(self) -> str:
        return json.dumps(self.metrics, sort_keys=True, indent=2) + "\n"


def final_step_pr(forecasts: list[FrameForecast],
                  frames: list[PreparedFrame]) -> PRCurve:
    """Pooled PR curve at the last forecast timestep, for plotting."""
    probs, truth = _pool_pixels([f.scene for f in forecasts],
                                [f.occupancy for f in frames])
    return pr_curve(probs[-1], truth[-1])


def _pool_pixels(forecasts: list[np.ndarray], labels: list[np.ndarray]
                 ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    horizon = forecasts[0].shape[0]
    probs = [np.concatenate([f[t].ravel() for f in forecasts])
             for t in range(horizon)]
    truth = [np.concatenate([lab[t].ravel() for lab in labels])
             for t in range(horizon)]
    return probs, truth


def evaluate_forecasts(forecasts: list[FrameForecast],
                       frames: list[PreparedFrame],
                       actor_grid: GridSpec,
                       settings: EvalSettings,
                       suppressed_cells: list[np.ndarray] | None = None
                       ) -> EvalReport:
    """Score precomputed per-frame forecasts against prepared labels."""
    if len(forecasts) != len(frames) or not frames:
        raise MetricError("need one forecast per frame, at least one frame")
    horizon = frames[0].occupancy.shape[0]

    probs, truth = _pool_pixels([f.scene for f in forecasts],
                                [f.occupancy for f in frames])
    avg_map, final_map, ap_flags = avg_and_final_map(probs, truth)
    rel = reliability(np.concatenate(probs), np.concatenate(truth),
                      settings.calibration_bins)

    nlls, e_rmse, a_rmse, m_rmse = [], [], [], []
    n_tp = n_det = 0
    coverage_miss = 0
    for forecast, frame in zip(forecasts, frames):
        dets = forecast.detections
        n_det += len(dets)
        matches = match_true_positives(dets, frame.gt_xy, settings.match_radius)
        for det, pmf, m in zip(dets, forecast.pmfs, matches):
            if m is None:
                continue
            n_tp += 1
            pose = Pose2D(det.x, det.y, det.heading)
            gt = frame.gt_futures[m, horizon - 1]
            final_pmf = pmf[horizon - 1]
            nll = motion_nll(final_pmf, actor_grid, pose, gt)
            if nll is None:
                coverage_miss += 1
            else:
                nlls.append(nll)
            e_rmse.append(expected_rmse(final_pmf, actor_grid, pose, gt))
            a_rmse.append(argmax_rmse(final_pmf, actor_grid, pose, gt))
            m_rmse.append(min_rmse_at_m(final_pmf, actor_grid, pose, gt,
                                        settings.min_rmse_m))

    def mean_or_nan(values) -> float:
        return float(np.mean(values)) if values else float("nan")

    metrics = {
        "avg_map": avg_map,
        "final_map": final_map,
        "ace": rel.ace,
        "mce": rel.mce,
        "nll": mean_or_nan(nlls),
        "expected_rmse": mean_or_nan(e_rmse),
        "argmax_rmse": mean_or_nan(a_rmse),
        "min_rmse_25": mean_or_nan(m_rmse),
    }
    diagnostics = {
        "n_frames": len(frames),
        "n_detections": n_det,
        "n_true_positives": n_tp,
        "nll_coverage_misses": coverage_miss,
        "ap_has_positives": ap_flags,
        "empty_calibration_bins": rel.empty_bins,
        "reliability": {
            "edges": rel.edges.tolist(),
            "mean_confidence": [None if np.isnan(v) else v
                                for v in rel.mean_confidence],
            "accuracy": [None if np.isnan(v) else v for v in rel.accuracy],
            "count": rel.count.tolist(),
        },
    }
    if suppressed_cells is not None:
        stats = suppressed_gt_stats(forecasts, suppressed_cells)
        stats.update(matched_precision_recalls(forecasts, frames,
                                               suppressed_cells))
        diagnostics["suppressed_gt"] = stats
    return EvalReport(metrics, diagnostics)


def suppressed_gt_stats(forecasts: list[FrameForecast],
                        suppressed_cells: list[np.ndarray]) -> dict:
    """Mean forecast probability over suppressed actors' GT cells.

    Reported for the scene head and the instance aggregation; the cells
    come in as per-frame binary (T, H, W) masks.
    """
    scene_vals, agg_vals = [], []
    for forecast, mask in zip(forecasts, suppressed_cells):
        sel = mask > 0
        if not sel.any():
            continue
        scene_vals.append(forecast.scene[sel])
        agg_vals.append(forecast.aggregation[sel])
    if not scene_vals:
        return {"n_cells": 0, "scene_mean": None, "aggregation_mean": None}
    scene_all = np.concatenate(scene_vals)
    agg_all = np.concatenate(agg_vals)
    return {"n_cells": int(scene_all.size),
            "scene_mean": float(scene_all.mean()),
            "aggregation_mean": float(agg_all.mean())}


def _f1_operating_point(curve: PRCurve) -> int:
    """Index of the best-F1 point; ties resolve to the lowest threshold."""
    p, r = curve.precision, curve.recall
    denom = np.where(p + r > 0, p + r, 1.0)
    f1 = np.where(p + r > 0, 2.0 * p * r / denom, 0.0)
    return int(f1.size - 1 - np.argmax(f1[::-1]))


def matched_precision_recalls(forecasts: list[FrameForecast],
                              frames: list[PreparedFrame],
                              suppressed_cells: list[np.ndarray]) -> dict:
    """Recall of each head on suppressed actors' GT cells at equal precision.

    Both heads are thresholded at operating points of equal precision on
    the full pooled pixel set: the aggregation picks its best-F1 point,
    and the scene head takes the lowest threshold whose precision still
    meets that bar (falling back to its highest-precision point when the
    bar is out of reach). Recall is then the fraction of suppressed-GT
    cells scored at or above each head's threshold.
    """
    out = {"precision_bar": None, "scene_threshold": None,
           "aggregation_threshold": None, "scene_recall_matched": None,
           "aggregation_recall_matched": None}
    masks = [m > 0 for m in suppressed_cells]
    n_cells = int(sum(m.sum() for m in masks))
    if n_cells == 0:
        return out
    truth = np.concatenate([f.occupancy.ravel() for f in frames])
    agg_curve = pr_curve(
        np.concatenate([f.aggregation.ravel() for f in forecasts]), truth)
    scene_curve = pr_curve(
        np.concatenate([f.scene.ravel() for f in forecasts]), truth)
    if not (agg_curve.has_positives and scene_curve.has_positives):
        return out

    at = _f1_operating_point(agg_curve)
    bar = float(agg_curve.precision[at])
    tau_agg = float(agg_curve.thresholds[at])
    ok = np.flatnonzero(scene_curve.precision >= bar - 1e-12)
    if not ok.size:
        ok = np.flatnonzero(
            scene_curve.precision >= scene_curve.precision.max() - 1e-12)
    tau_scene = float(scene_curve.thresholds[int(ok[-1])])

    scene_hits = sum(int((f.scene[m] >= tau_scene).sum())
                     for f, m in zip(forecasts, masks))
    agg_hits = sum(int((f.aggregation[m] >= tau_agg).sum())
                   for f, m in zip(forecasts, masks))
    out.update(precision_bar=bar, scene_threshold=tau_scene,
               aggregation_threshold=tau_agg,
               scene_recall_matched=scene_hits / n_cells,
               aggregation_recall_matched=agg_hits / n_cells)
    return out


def evaluate_model(model: ForecastModel, frames: list[PreparedFrame],
                   settings: EvalSettings,
                   keep_forecasts: bool = False) -> EvalReport:
    """Detect, threshold at common recall, optionally suppress, forecast,
    and score. The threshold always comes from the unsuppressed detections."""
    if not frames:
        raise MetricError("evaluation needs at least one frame")

    raw = parallel_map(lambda f: detect_frame(model, f)[0], frames,
                       settings.threads)
    threshold, achieved, reachable = common_recall_threshold(
        raw, [f.gt_xy for f in frames], settings.target_recall,
        settings.match_radius)

    survivors, suppressed_cells = [], []
    horizon = model.settings.horizon
    for frame, dets in zip(frames, raw):
        thresholded = [d for d in dets if d.score >= threshold]
        kept, dropped = suppress_detections(thresholded, frame.frame_id,
                                            settings.suppress_fraction)
        survivors.append(kept)
        suppressed_cells.append(_dropped_gt_cells(
            model, frame, [thresholded[i] for i in dropped],
            settings.match_radius, horizon))

    forecasts = parallel_map(
        lambda pair: forecast_frame(model, pair[0], pair[1], settings.ablation),
        list(zip(frames, survivors)), settings.threads)

    report = evaluate_forecasts(forecasts, frames,
                                model.settings.interaction.actor_grid,
                                settings,
                                suppressed_cells if settings.suppress_fraction
                                else None)
    report.diagnostics["detection_threshold"] = threshold
    report.diagnostics["threshold_recall"] = achieved
    report.diagnostics["threshold_reachable"] = reachable
    report.diagnostics["ablation"] = settings.ablation
    report.diagnostics["suppress_fraction"] = settings.suppress_fraction
    if keep_forecasts:
        report.forecasts = forecasts
    return report


def _dropped_gt_cells(model: ForecastModel, frame: PreparedFrame,
                      dropped: list[Detection], match_radius: float,
                      horizon: int) -> np.ndarray:
    """GT future cells of the actors a dropped detection was covering."""
    from .voxelize import rasterize_disks

    out = np.zeros_like(frame.occupancy)
    if not dropped:
        return out
    matches = match_greedy(dropped, frame.gt_xy, match_radius)
    gt_ids = sorted({m for m in matches if m is not None})
    if not gt_ids:
        return out
    for t in range(horizon):
        out[t] = rasterize_disks(frame.gt_futures[gt_ids, t, :],
                                 model.settings.ped_radius, model.scene_grid)
    return out


def write_report(report: EvalReport, path) -> None:
    """Metrics JSON at path, diagnostics next to it."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    base, ext = os.path.splitext(str(path))
    with open(f"{base}.diagnostics{ext or '.json'}", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report.diagnostics, sort_keys=True, indent=2) + "\n")

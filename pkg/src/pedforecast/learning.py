"""Losses, hard negative mining, scheduled sampling, Adam, training loop.

Loss terms are fused tape ops: each computes a masked sum in one forward
pass and pushes exact elementwise gradients back. Mining picks the mask
with plain numpy before the op records; the selection is constant during
backward, like max routing.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec, Pose2D, point_to_cell
from .grid import (GridTensor, NumericalError, ShapeError, Tape,
                   accumulate_grad, add, weighted_sum, zero_grads)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    class_weight: float = 1.0
    reg_weight: float = 1.0
    pred_weight: float = 1.0
    scene_weight: float = 0.5

    def __post_init__(self) -> None:
        for w in self.as_tuple():
            if not (math.isfinite(w) and w >= 0):
                raise TrainingError(f"loss weight {w} must be finite and >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.class_weight, self.reg_weight, self.pred_weight,
                self.scene_weight)


# ---------------------------------------------------------------------------
# fused loss ops


def bce_logits_values(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Elementwise binary cross entropy on logits, numerically stable."""
    x, t = np.asarray(logits), np.asarray(targets)
    return np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits_sum(logits: GridTensor, targets: np.ndarray,
                        mask: np.ndarray, tape: Tape | None = None) -> GridTensor:
    """Sum of per-element BCE over mask; gradient is mask * (sigmoid - t)."""
    t = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if t.shape != logits.shape or m.shape != logits.shape:
        raise ShapeError("bce_with_logits_sum: shape mismatch")
    out = GridTensor(np.asarray((bce_logits_values(logits.data, t) * m).sum()))
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            sig = 1.0 / (1.0 + np.exp(-logits.data))
            accumulate_grad(logits, float(out.grad) * m * (sig - t))
        tape.record(backward)
    return out


def bce_prob_values(probs: np.ndarray, targets: np.ndarray,
                    eps: float = 1e-12) -> np.ndarray:
    p = np.clip(np.asarray(probs), eps, 1.0 - eps)
    t = np.asarray(targets)
    return -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def bce_on_probs_sum(probs: GridTensor, targets: np.ndarray, mask: np.ndarray,
                     tape: Tape | None = None, eps: float = 1e-12) -> GridTensor:
    """Masked BCE sum on probabilities; clamped regions get zero gradient."""
    t = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if t.shape != probs.shape or m.shape != probs.shape:
        raise ShapeError("bce_on_probs_sum: shape mismatch")
    out = GridTensor(np.asarray((bce_prob_values(probs.data, t, eps) * m).sum()))
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            p = probs.data
            live = (p > eps) & (p < 1.0 - eps)
            safe = np.clip(p, eps, 1.0 - eps)
            grad = np.where(live, (safe - t) / (safe * (1.0 - safe)), 0.0)
            accumulate_grad(probs, float(out.grad) * m * grad)
        tape.record(backward)
    return out


def smooth_l1_values(residuals: np.ndarray) -> np.ndarray:
    m = np.abs(residuals)
    return np.where(m < 1.0, 0.5 * residuals * residuals, m - 0.5)


def smooth_l1_sum(pred: GridTensor, targets: np.ndarray, mask: np.ndarray,
                  tape: Tape | None = None) -> GridTensor:
    """Masked smooth-L1 sum; the branch point sits at |residual| = 1."""
    t = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError("smooth_l1_sum: shape mismatch")
    residual = pred.data - t
    out = GridTensor(np.asarray((smooth_l1_values(residual) * m).sum()))
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            grad = np.where(np.abs(residual) < 1.0, residual, np.sign(residual))
            accumulate_grad(pred, float(out.grad) * m * grad)
        tape.record(backward)
    return out


def nll_at_cells(pmf: GridTensor, cells: np.ndarray,
                 tape: Tape | None = None, eps: float = 1e-12) -> GridTensor:
    """-sum(log pmf[t, r, c]) over (t, r, c) rows, clamped below at eps."""
    idx = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if idx.size == 0:
        return GridTensor(np.asarray(0.0))
    values = pmf.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    out = GridTensor(np.asarray(-np.log(np.maximum(values, eps)).sum()))
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = np.zeros_like(pmf.data)
            contrib = np.where(values > eps, -1.0 / np.maximum(values, eps), 0.0)
            np.add.at(g, (idx[:, 0], idx[:, 1], idx[:, 2]),
                      float(out.grad) * contrib)
            accumulate_grad(pmf, g)
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# mining and loss assembly


def mined_negative_mask(losses: np.ndarray, positives: np.ndarray,
                        ratio: int) -> np.ndarray:
    """Top ratio*|pos| negatives by loss, ties to the lowest flat index."""
    pos = np.asarray(positives, dtype=bool)
    neg_losses = np.where(pos, -np.inf, np.asarray(losses))
    budget = min(int(ratio) * int(pos.sum()), int((~pos).sum()))
    mask = np.zeros(pos.shape, dtype=bool)
    if budget > 0:
        order = np.argsort(-neg_losses.ravel(), kind="stable")[:budget]
        mask.ravel()[order] = True
    return mask


def detection_class_loss(logits: GridTensor, positives: np.ndarray,
                         ratio: int = 3, tape: Tape | None = None) -> GridTensor:
    """BCE over positives plus the mined hardest negatives."""
    pos = np.asarray(positives, dtype=bool)
    if pos.shape != logits.shape:
        raise ShapeError("detection_class_loss: label shape mismatch")
    losses = bce_logits_values(logits.data, pos.astype(np.float64))
    mask = pos | mined_negative_mask(losses, pos, ratio)
    return bce_with_logits_sum(logits, pos.astype(np.float64),
                               mask.astype(np.float64), tape)


def detection_reg_loss(pred: GridTensor, targets: np.ndarray,
                       positives: np.ndarray,
                       tape: Tape | None = None) -> GridTensor:
    """Smooth-L1 over the four offset components at positive anchors."""
    pos = np.asarray(positives, dtype=bool)
    if pred.shape != np.asarray(targets).shape:
        raise ShapeError("detection_reg_loss: target shape mismatch")
    if pos.shape != pred.shape[1:]:
        raise ShapeError("detection_reg_loss: positives shape mismatch")
    mask = np.broadcast_to(pos, pred.shape).astype(np.float64)
    return smooth_l1_sum(pred, targets, mask, tape)


def scene_bce_loss(forecast: GridTensor, occupancy: np.ndarray, ratio: int = 3,
                   mining: bool = True, tape: Tape | None = None) -> GridTensor:
    """Per-timestep BCE with the detection mining scheme on free cells."""
    gt = np.asarray(occupancy, dtype=np.float64)
    if gt.shape != forecast.shape:
        raise ShapeError("scene_bce_loss: occupancy shape mismatch")
    if set(np.unique(gt)) - {0.0, 1.0}:
        raise TrainingError("occupancy targets must be binary")
    if mining:
        losses = bce_prob_values(forecast.data, gt)
        mask = np.zeros(gt.shape, dtype=bool)
        for t in range(gt.shape[0]):
            pos = gt[t] > 0
            mask[t] = pos | mined_negative_mask(losses[t], pos, ratio)
    else:
        mask = np.ones(gt.shape, dtype=bool)
    return bce_on_probs_sum(forecast, gt, mask.astype(np.float64), tape)


def world_to_actor_cell(grid: GridSpec, pose: Pose2D,
                        point_xy: np.ndarray) -> tuple[int, int] | None:
    """Actor-frame cell containing a world point, or None when outside."""
    dx = point_xy[0] - pose.x
    dy = point_xy[1] - pose.y
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return point_to_cell(grid, local_x, local_y)


@dataclass
class MotionLossStats:
    terms: int = 0
    skipped: int = 0

    @property
    def coverage(self) -> float:
        total = self.terms + self.skipped
        return self.terms / total if total else 1.0


def motion_nll_loss(pmfs: list[GridTensor], poses: list[Pose2D],
                    futures: list[np.ndarray], grid: GridSpec,
                    tape: Tape | None = None
                    ) -> tuple[GridTensor, MotionLossStats]:
    """NLL of each in-grid ground-truth cell; out-of-grid steps are counted."""
    if not (len(pmfs) == len(poses) == len(futures)):
        raise ShapeError("motion_nll_loss: one pmf, pose and future per actor")
    stats = MotionLossStats()
    total = GridTensor(np.asarray(0.0))
    for pmf, pose, future in zip(pmfs, poses, futures):
        steps = np.asarray(future, dtype=np.float64).reshape(-1, 2)
        if len(steps) != pmf.shape[0]:
            raise ShapeError("motion_nll_loss: future length != pmf timesteps")
        cells = []
        for t, point in enumerate(steps):
            cell = world_to_actor_cell(grid, pose, point)
            if cell is None:
                stats.skipped += 1
            else:
                cells.append((t, cell[0], cell[1]))
                stats.terms += 1
        if cells:
            total = add(total, nll_at_cells(pmf, np.array(cells), tape), tape)
    return total, stats


def total_loss(class_term: GridTensor, reg_term: GridTensor,
               pred_term: GridTensor, scene_term: GridTensor,
               weights: LossWeights, tape: Tape | None = None) -> GridTensor:
    return weighted_sum([class_term, reg_term, pred_term, scene_term],
                        list(weights.as_tuple()), tape)


# ---------------------------------------------------------------------------
# scheduled sampling


@dataclass(frozen=True)
class ScheduledSamplingPolicy:
    """Keep ground-truth poses for warmup iterations, then decay stepwise."""

    warmup: int = 10000
    interval: int = 5000
    decay: float = 0.1

    def __post_init__(self) -> None:
        if self.warmup < 0 or self.interval < 1 or not 0 <= self.decay <= 1:
            raise TrainingError("bad scheduled sampling policy")

    @classmethod
    def scaled(cls, total_iterations: int) -> "ScheduledSamplingPolicy":
        """Desk-scale shape: 10% warmup, 5% decay interval."""
        warmup = max(1, round(0.1 * total_iterations))
        interval = max(1, round(0.05 * total_iterations))
        return cls(warmup, interval, 0.1)


def sampling_probability(iteration: int, policy: ScheduledSamplingPolicy) -> float:
    if iteration < 0:
        raise TrainingError("iteration must be >= 0")
    if iteration < policy.warmup:
        return 1.0
    steps = math.floor((iteration - policy.warmup) / policy.interval) + 1
    return max(0.0, min(1.0, 1.0 - policy.decay * steps))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainingError("bad Adam hyperparameters")


def adam_step(params: dict[str, GridTensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; missing gradients count as zero."""
    state.step += 1
    correct1 = 1.0 - state.beta1 ** state.step
    correct2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainSettings:
    iterations: int = 200
    lr: float = 3e-3
    weights: LossWeights = field(default_factory=LossWeights)
    policy: ScheduledSamplingPolicy | None = None
    mining_ratio: int = 3
    scene_mining: bool = True
    match_radius: float = 2.0
    decode_score: float = 0.5
    seed: int = 0

    def resolved_policy(self) -> ScheduledSamplingPolicy:
        return self.policy or ScheduledSamplingPolicy.scaled(self.iterations)


@dataclass
class TraceRow:
    iteration: int
    class_term: float
    reg_term: float
    pred_term: float
    scene_term: float
    total: float

    def as_csv(self) -> list:
        return [self.iteration, self.class_term, self.reg_term,
                self.pred_term, self.scene_term, self.total]


def write_trace(rows: list[TraceRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "class", "reg", "pred", "scene", "total"])
        for row in rows:
            writer.writerow(row.as_csv())


@dataclass
class TrainResult:
    rows: list[TraceRow]
    adam: AdamState

    @property
    def initial_loss(self) -> float:
        return self.rows[0].total

    @property
    def final_loss(self) -> float:
        return self.rows[-1].total


def train(model, frames, settings: TrainSettings,
          adam: AdamState | None = None, start_iteration: int = 0,
          progress=None) -> TrainResult:
    """Iterate frames round-robin: forward, total loss, backward, Adam.

    The scheduled-sampling coin is drawn from a per-iteration stateless
    stream, so runs are bitwise reproducible and resumable mid-run.
    """
    from . import model as model_lib

    if not frames:
        raise TrainingError("training needs at least one frame")
    policy = settings.resolved_policy()
    state = adam if adam is not None else AdamState(lr=settings.lr)
    params = model.named_parameters()
    rows: list[TraceRow] = []
    for it in range(start_iteration, settings.iterations):
        frame = frames[it % len(frames)]
        coin = np.random.default_rng([settings.seed, 3, it]).random()
        use_gt = coin < sampling_probability(it, policy)

        tape = Tape()
        losses = model_lib.frame_losses(model, frame, settings, tape,
                                        use_gt_poses=use_gt)
        total = total_loss(losses.class_term, losses.reg_term,
                           losses.pred_term, losses.scene_term,
                           settings.weights, tape)
        if not np.isfinite(total.data):
            raise NumericalError(f"iteration {it}: loss is not finite")
        tape.backward(total)
        adam_step(params, state)
        zero_grads(params.values())
        rows.append(TraceRow(it, losses.class_term.item(), losses.reg_term.item(),
                             losses.pred_term.item(), losses.scene_term.item(),
                             total.item()))
        if progress is not None:
            progress(rows[-1])
    return TrainResult(rows, state)

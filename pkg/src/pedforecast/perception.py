"""Two-stream backbone, detection head, anchor coding, NMS, thresholding."""
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec, cell_centers, normalize_heading
from .grid import (ConvSpec, GridTensor, ShapeError, Tape, add,
                   concat_channels, conv2d, conv_named_parameters, group_norm,
                   make_conv_spec, relu)


class PerceptionError(ValueError):
    pass


# both sparse-target heads start at sigmoid(x) = 0.01
PRIOR_LOGIT = math.log(0.01 / 0.99)


@dataclass(frozen=True)
class BackboneConfig:
    """Stream and fusion-header layout.

    Desk default: two [8, 16, 32] streams at strides (1, 2, 2) and a two-conv
    header ending at 14 context channels, so downstream actor states reach 16
    channels once coordinate layers join. The large preset mirrors the wide
    four-block plan with stride (1, 2, 2, 2) and a 256-wide header.
    """

    lidar_channels: tuple[int, ...] = (8, 16, 32)
    map_channels: tuple[int, ...] = (8, 16, 32)
    strides: tuple[int, ...] = (1, 2, 2)
    header_width: int = 32
    context_channels: int = 14
    kernel: int = 3
    use_group_norm: bool = False
    norm_groups: int = 4

    def __post_init__(self) -> None:
        if len(self.lidar_channels) != len(self.strides) \
                or len(self.map_channels) != len(self.strides):
            raise PerceptionError("each stream needs one stride per block")
        if not self.strides or any(s < 1 for s in self.strides):
            raise PerceptionError("strides must be positive")
        if self.kernel % 2 != 1:
            raise PerceptionError("stream kernels must be odd for same-padding")
        if self.header_width < 1 or self.context_channels < 1:
            raise PerceptionError("header sizes must be positive")

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out


@dataclass
class StreamBlock:
    conv: ConvSpec
    gamma: GridTensor | None = None
    beta: GridTensor | None = None


@dataclass
class BackboneParams:
    config: BackboneConfig
    lidar_blocks: list[StreamBlock]
    map_blocks: list[StreamBlock]
    header: list[ConvSpec]

    def named_parameters(self) -> dict[str, GridTensor]:
        out: dict[str, GridTensor] = {}
        for stream, blocks in (("lidar", self.lidar_blocks),
                               ("map", self.map_blocks)):
            for i, block in enumerate(blocks):
                out.update(conv_named_parameters(f"backbone/{stream}{i}", block.conv))
                if block.gamma is not None:
                    out[f"backbone/{stream}{i}/gamma"] = block.gamma
                    out[f"backbone/{stream}{i}/beta"] = block.beta
        for i, spec in enumerate(self.header):
            out.update(conv_named_parameters(f"backbone/header{i}", spec))
        return out


def make_backbone(rng: np.random.Generator, config: BackboneConfig,
                  bev_channels: int, map_channels: int) -> BackboneParams:
    pad = config.kernel // 2

    def stream(channels, c_in):
        blocks = []
        for width, stride in zip(channels, config.strides):
            conv = make_conv_spec(rng, c_in, width, config.kernel, stride, pad)
            gamma = beta = None
            if config.use_group_norm:
                gamma = GridTensor(np.ones(width))
                beta = GridTensor(np.zeros(width))
            blocks.append(StreamBlock(conv, gamma, beta))
            c_in = width
        return blocks

    lidar = stream(config.lidar_channels, bev_channels)
    map_blocks = stream(config.map_channels, map_channels)
    fused = config.lidar_channels[-1] + config.map_channels[-1]
    header = [make_conv_spec(rng, fused, config.header_width, config.kernel, 1, pad),
              make_conv_spec(rng, config.header_width, config.context_channels, 1)]
    return BackboneParams(config, lidar, map_blocks, header)


def _run_stream(x: GridTensor, blocks: list[StreamBlock], config: BackboneConfig,
                tape: Tape | None) -> GridTensor:
    for block in blocks:
        x = conv2d(x, block.conv, tape)
        if block.gamma is not None:
            x = group_norm(x, config.norm_groups, block.gamma, block.beta, tape=tape)
        x = relu(x, tape)
    return x


def backbone_forward(bev: GridTensor, map_raster: GridTensor,
                     params: BackboneParams, tape: Tape | None = None) -> GridTensor:
    """Fused scene context at the downsampled resolution."""
    if bev.data.shape[1:] != map_raster.data.shape[1:]:
        raise ShapeError("sweep tensor and map raster must share a grid")
    cfg = params.config
    a = _run_stream(bev, params.lidar_blocks, cfg, tape)
    b = _run_stream(map_raster, params.map_blocks, cfg, tape)
    x = concat_channels([a, b], tape)
    x = relu(conv2d(x, params.header[0], tape), tape)
    return conv2d(x, params.header[1], tape)


def context_grid(input_grid: GridSpec, config: BackboneConfig) -> GridSpec:
    """Grid of the context feature map; one anchor sits at each cell."""
    f = config.total_stride
    if input_grid.rows % f or input_grid.cols % f:
        raise PerceptionError(f"grid {input_grid.rows}x{input_grid.cols} not "
                              f"divisible by total stride {f}")
    return GridSpec(input_grid.rows // f, input_grid.cols // f,
                    input_grid.resolution * f,
                    input_grid.origin_x, input_grid.origin_y)


# ---------------------------------------------------------------------------
# detection head


@dataclass
class DetectionHeadParams:
    """Two convs to 5 per-anchor channels: logit, dx, dy, sin, cos."""

    hidden: ConvSpec
    out: ConvSpec

    def named_parameters(self) -> dict[str, GridTensor]:
        params = conv_named_parameters("det/hidden", self.hidden)
        params.update(conv_named_parameters("det/out", self.out))
        return params


def make_detection_head(rng: np.random.Generator, context_channels: int,
                        width: int = 32) -> DetectionHeadParams:
    head = DetectionHeadParams(
        make_conv_spec(rng, context_channels, width, 3, 1, 1),
        make_conv_spec(rng, width, 5, 1))
    # start the classifier near the positive-anchor base rate so early
    # training is not spent pulling every score down from 0.5
    head.out.bias.data[0] = PRIOR_LOGIT
    return head


def detection_head_forward(context: GridTensor, params: DetectionHeadParams,
                           tape: Tape | None = None) -> GridTensor:
    return conv2d(relu(conv2d(context, params.hidden, tape), tape), params.out, tape)


@dataclass(frozen=True)
class Detection:
    """Point detection: confidence, scene-frame centroid and heading."""

    score: float
    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise PerceptionError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "heading", normalize_heading(self.heading))


def decode_anchors(head_out: GridTensor, anchor_grid: GridSpec,
                   min_score: float = 0.0) -> list[Detection]:
    """One candidate per anchor: center + regressed offset, decoded heading."""
    data = head_out.data
    if data.shape != (5, anchor_grid.rows, anchor_grid.cols):
        raise ShapeError(f"head output {data.shape} does not match anchor grid")
    centers = cell_centers(anchor_grid)
    scores = 1.0 / (1.0 + np.exp(-data[0]))
    dets = []
    for r in range(anchor_grid.rows):
        for c in range(anchor_grid.cols):
            score = float(scores[r, c])
            if score < min_score:
                continue
            dets.append(Detection(
                score,
                float(centers[r, c, 0] + data[1, r, c]),
                float(centers[r, c, 1] + data[2, r, c]),
                math.atan2(data[3, r, c], data[4, r, c])))
    return dets


def encode_anchor_targets(gt_poses: np.ndarray, anchor_grid: GridSpec
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Assignment and regression targets for ground-truth poses (x, y, heading).

    The nearest anchor to each centroid is positive; ties go to the lowest
    anchor index (row-major). Returns (positive mask H×W, targets 4×H×W).
    """
    gt = np.asarray(gt_poses, dtype=np.float64).reshape(-1, 3)
    positives = np.zeros((anchor_grid.rows, anchor_grid.cols), dtype=bool)
    targets = np.zeros((4, anchor_grid.rows, anchor_grid.cols))
    centers = cell_centers(anchor_grid).reshape(-1, 2)
    for x, y, heading in gt:
        d2 = (centers[:, 0] - x) ** 2 + (centers[:, 1] - y) ** 2
        idx = int(np.argmin(d2))    # argmin returns the lowest tied index
        r, c = divmod(idx, anchor_grid.cols)
        positives[r, c] = True
        targets[0, r, c] = x - centers[idx, 0]
        targets[1, r, c] = y - centers[idx, 1]
        targets[2, r, c] = math.sin(heading)
        targets[3, r, c] = math.cos(heading)
    return positives, targets


def nms(dets: list[Detection], radius_m: float) -> list[Detection]:
    """Greedy distance NMS; score ties keep the lowest-index detection."""
    if radius_m <= 0:
        raise PerceptionError("nms radius must be positive")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    xy = np.array([[d.x, d.y] for d in dets])
    kept_idx: list[int] = []
    for i in order:
        p = xy[i]
        ok = True
        for j in kept_idx:
            if (p[0] - xy[j, 0]) ** 2 + (p[1] - xy[j, 1]) ** 2 < radius_m ** 2:
                ok = False
                break
        if ok:
            kept_idx.append(int(i))
    kept_idx.sort()
    return [dets[i] for i in kept_idx]


def match_greedy(dets: list[Detection], gt_xy: np.ndarray, radius: float
                 ) -> list[int | None]:
    """Greedy TP assignment: descending score, nearest unmatched GT in range.

    Returns, per detection (original order), the matched GT index or None.
    Score ties process the lower detection index first.
    """
    gt = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    result: list[int | None] = [None] * len(dets)
    taken = np.zeros(len(gt), dtype=bool)
    order = np.argsort(-np.array([d.score for d in dets]), kind="stable") \
        if dets else []
    for i in order:
        d = dets[int(i)]
        best, best_d2 = None, radius * radius
        for g in range(len(gt)):
            if taken[g]:
                continue
            d2 = (d.x - gt[g, 0]) ** 2 + (d.y - gt[g, 1]) ** 2
            if d2 < best_d2 or (best is None and d2 == best_d2):
                best, best_d2 = g, d2
        if best is not None:
            taken[best] = True
            result[int(i)] = best
    return result


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float
    achieved_recall: float
    reachable: bool


def threshold_at_recall(dets: list[Detection], gt_xy: np.ndarray,
                        target_recall: float, match_radius: float
                        ) -> ThresholdResult:
    """Largest score threshold whose survivors still hit the target recall.

    Greedy matching processes detections in descending score order, so the
    matching of survivors at any threshold is a prefix of one full pass.
    Unreachable targets return the minimum score (0 if no detections),
    flagged via reachable=False.
    """
    if not 0.0 < target_recall <= 1.0:
        raise PerceptionError("target recall must be in (0, 1]")
    gt = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    if not dets or not len(gt):
        return ThresholdResult(min((d.score for d in dets), default=0.0), 0.0, False)
    matches = match_greedy(dets, gt, match_radius)
    scores = np.array([d.score for d in dets])
    matched_scores = np.sort(scores[[m is not None for m in matches]])[::-1]
    needed = math.ceil(target_recall * len(gt))
    if len(matched_scores) < needed:
        return ThresholdResult(float(scores.min()),
                               len(matched_scores) / len(gt), False)
    threshold = float(matched_scores[needed - 1])
    achieved = int((matched_scores >= threshold).sum()) / len(gt)
    return ThresholdResult(threshold, achieved, True)

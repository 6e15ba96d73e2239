"""Scene-actor graph: spatial node states, message rounds, output heads.

Actor node states are feature maps in each actor's own frame; the scene
node state lives at the context resolution. One round runs three phases:
actor-to-actor messages (vector bottleneck, max-aggregated, deconvolved
back to spatial), actor-to-scene canvases (max-aggregated into a scene
GRU update), then scene-to-actor messages that read the scene state from
before this round's update. A shared ConvGRU applies both actor updates.
"""
from dataclasses import dataclass

import numpy as np

from .geometry import (AffineTransform, GridSpec, Pose2D, RotatedBox,
                       cell_centers, pose_to_world, relative_transform)
from .grid import (ConvGRUSpec, ConvSpec, GridTensor, ShapeError, Tape,
                   bilinear_warp, concat_channels, conv2d, conv_gru_step,
                   conv_named_parameters, conv_output_size, coord_channels,
                   deconv2d, gru_named_parameters, independent_union,
                   make_conv_gru_spec, make_conv_spec, make_deconv_spec,
                   masked_slice_sum, max_reduce, relu, rescale_slices,
                   roi_align, sigmoid, softmax_spatial)
from .perception import PRIOR_LOGIT, Detection


class InteractionError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionConfig:
    """Shapes and hyperparameters of the graph stage.

    actor_channels must equal the RoI channel count plus two coordinate
    layers (or exactly the RoI channels when coordconv is disabled). The
    vector_stack entries are (kernel, stride, padding) triples that must
    collapse the actor grid to 1x1.
    """

    actor_rows: int = 16
    actor_cols: int = 16
    actor_resolution: float = 1.0
    context_channels: int = 14
    use_coordconv: bool = True
    emb_channels: int = 16
    vector_widths: tuple[int, ...] = (16, 16)
    vector_stack: tuple[tuple[int, int, int], ...] = ((4, 2, 1), (4, 2, 0), (3, 1, 0))
    vector_dim: int = 32
    msg_channels: int = 16
    scene_channels: int = 16
    horizon: int = 10
    mp_rounds: int = 2
    knn_k: int = 6
    neighbor_radius: float = 32.0
    roi_samples: int = 2
    head_width: int = 16
    scene_head_width: int = 32
    scene_upsample: int = 2      # stride-2 deconvs from state grid to scene grid

    def __post_init__(self) -> None:
        if self.actor_rows < 1 or self.actor_cols < 1 or self.actor_resolution <= 0:
            raise InteractionError("bad actor grid")
        if len(self.vector_stack) != len(self.vector_widths) + 1:
            raise InteractionError("vector_stack needs one layer per width plus "
                                   "the final vector layer")
        if self.mp_rounds < 0:
            raise InteractionError("round count must be >= 0")
        if self.knn_k < 0 or self.neighbor_radius <= 0:
            raise InteractionError("bad graph limits")
        h, w = self.actor_rows, self.actor_cols
        for kernel, stride, padding in self.vector_stack:
            h = conv_output_size(h, kernel, stride, padding)
            w = conv_output_size(w, kernel, stride, padding)
        if (h, w) != (1, 1):
            raise InteractionError(f"vector_stack reduces to {h}x{w}, expected 1x1")

    @property
    def actor_channels(self) -> int:
        return self.context_channels + (2 if self.use_coordconv else 0)

    @property
    def actor_grid(self) -> GridSpec:
        return GridSpec(self.actor_rows, self.actor_cols, self.actor_resolution)


@dataclass
class InteractionParams:
    config: InteractionConfig
    f_emb: ConvSpec
    f_actor: list[ConvSpec]
    f_deconv: list[ConvSpec]
    u_actor: ConvGRUSpec
    f_instance: list[ConvSpec]
    u_scene: ConvGRUSpec
    f_scene: list[ConvSpec]
    scene_init: ConvSpec
    o_actor: list[ConvSpec]
    o_scene: list[ConvSpec]

    def named_parameters(self) -> dict[str, GridTensor]:
        out = conv_named_parameters("graph/emb", self.f_emb)
        for name, stack in (("actor_msg", self.f_actor),
                            ("actor_deconv", self.f_deconv),
                            ("instance", self.f_instance),
                            ("scene_msg", self.f_scene),
                            ("actor_head", self.o_actor),
                            ("scene_head", self.o_scene)):
            for i, spec in enumerate(stack):
                out.update(conv_named_parameters(f"graph/{name}{i}", spec))
        out.update(gru_named_parameters("graph/actor_gru", self.u_actor))
        out.update(gru_named_parameters("graph/scene_gru", self.u_scene))
        out.update(conv_named_parameters("graph/scene_init", self.scene_init))
        return out


def make_interaction_params(rng: np.random.Generator,
                            config: InteractionConfig) -> InteractionParams:
    c = config
    f_emb = make_conv_spec(rng, c.actor_channels, c.emb_channels, 3, 1, 1)

    widths = list(c.vector_widths) + [c.vector_dim]
    f_actor, f_deconv = [], []
    c_in = 2 * c.emb_channels
    for (kernel, stride, padding), width in zip(c.vector_stack, widths):
        f_actor.append(make_conv_spec(rng, c_in, width, kernel, stride, padding))
        c_in = width
    deconv_widths = list(reversed(c.vector_widths)) + [c.msg_channels]
    c_in = c.vector_dim
    for (kernel, stride, padding), width in zip(reversed(c.vector_stack),
                                                deconv_widths):
        f_deconv.append(make_deconv_spec(rng, c_in, width, kernel, stride, padding))
        c_in = width

    u_actor = make_conv_gru_spec(rng, c.actor_channels, c.msg_channels)
    f_instance = [make_conv_spec(rng, c.actor_channels, c.msg_channels, 3, 1, 1),
                  make_conv_spec(rng, c.msg_channels, c.msg_channels, 3, 1, 1)]
    u_scene = make_conv_gru_spec(rng, c.scene_channels, c.msg_channels)
    f_scene = [make_conv_spec(rng, c.scene_channels + c.actor_channels,
                              c.msg_channels, 3, 1, 1),
               make_conv_spec(rng, c.msg_channels, c.msg_channels, 3, 1, 1)]
    scene_init = make_conv_spec(rng, c.context_channels, c.scene_channels, 1)
    o_actor = [make_conv_spec(rng, c.actor_channels, c.head_width, 3, 1, 1),
               make_conv_spec(rng, c.head_width, c.horizon, 3, 1, 1)]
    o_scene = [make_conv_spec(rng, c.scene_channels + c.horizon,
                              c.scene_head_width, 3, 1, 1)]
    up_in = c.scene_head_width
    for step in range(c.scene_upsample):
        last = step == c.scene_upsample - 1
        width = c.horizon if last else max(c.scene_head_width // 2, c.horizon)
        o_scene.append(make_deconv_spec(rng, up_in, width, 4, 2, 1))
        up_in = width
    # the occupancy head starts near the empty-scene base rate
    o_scene[-1].bias.data[:] = PRIOR_LOGIT
    return InteractionParams(c, f_emb, f_actor, f_deconv, u_actor, f_instance,
                             u_scene, f_scene, scene_init, o_actor, o_scene)


# ---------------------------------------------------------------------------
# graph construction


@dataclass(frozen=True)
class InteractionGraph:
    """Directed neighborhoods: neighbors[i] are the message sources for i."""

    n: int
    neighbors: tuple[tuple[int, ...], ...]


def build_graph(detections: list[Detection], radius_m: float = 32.0,
                k: int = 6) -> InteractionGraph:
    """At most k nearest in-range neighbors per node, ties to lower index."""
    if radius_m <= 0 or k < 0:
        raise InteractionError("bad graph limits")
    n = len(detections)
    xy = np.array([[d.x, d.y] for d in detections]).reshape(n, 2)
    if n and not np.isfinite(xy).all():
        raise InteractionError("detections must be finite")
    neighbors = []
    r2 = radius_m * radius_m
    for i in range(n):
        d2 = ((xy - xy[i]) ** 2).sum(axis=1)
        candidates = [(float(d2[j]), j) for j in range(n) if j != i and d2[j] < r2]
        candidates.sort()
        neighbors.append(tuple(j for _, j in candidates[:k]))
    return InteractionGraph(n, tuple(neighbors))


# ---------------------------------------------------------------------------
# node states


@dataclass
class ActorState:
    state: GridTensor            # (actor_channels, rows, cols), actor frame
    pose: Pose2D


def _stack_forward(x: GridTensor, stack: list[ConvSpec], tape: Tape | None,
                   kind: str) -> GridTensor:
    """Shallow stack: ReLU between layers, linear final layer."""
    op = deconv2d if kind == "deconv" else conv2d
    for i, spec in enumerate(stack):
        x = op(x, spec, tape)
        if i + 1 < len(stack):
            x = relu(x, tape)
    return x


def actor_box(pose: Pose2D, grid: GridSpec) -> RotatedBox:
    return RotatedBox(pose.x, pose.y, pose.heading, grid.width, grid.height)


def init_states(context: GridTensor, ctx_grid: GridSpec,
                detections: list[Detection], params: InteractionParams,
                tape: Tape | None = None) -> tuple[list[ActorState], GridTensor]:
    """RoI features (+ coordinate layers) per actor; projected scene state."""
    c = params.config
    if context.data.shape[0] != c.context_channels:
        raise ShapeError(f"context has {context.data.shape[0]} channels, "
                         f"config says {c.context_channels}")
    local = c.actor_grid
    coords = coord_channels(local.rows, local.cols)
    actors = []
    for det in detections:
        pose = Pose2D(det.x, det.y, det.heading)
        roi = roi_align(context, ctx_grid, actor_box(pose, local),
                        local.rows, local.cols, c.roi_samples, tape)
        state = concat_channels([roi, coords], tape) if c.use_coordconv else roi
        actors.append(ActorState(state, pose))
    scene = conv2d(context, params.scene_init, tape)
    return actors, scene


# ---------------------------------------------------------------------------
# message rounds


def _zero_message(config: InteractionConfig) -> GridTensor:
    return GridTensor.zeros((config.msg_channels, config.actor_rows,
                             config.actor_cols))


def actor_to_actor_round(actors: list[ActorState], graph: InteractionGraph,
                         params: InteractionParams,
                         tape: Tape | None = None) -> list[ActorState]:
    """Pairwise vector messages, max-aggregated, deconvolved, GRU applied.

    Actors with no neighbors receive a zero message tensor (the GRU still
    updates from zeros).
    """
    c = params.config
    local = c.actor_grid
    emb = [relu(conv2d(a.state, params.f_emb, tape), tape) for a in actors]
    updated = []
    for i, actor in enumerate(actors):
        sources = graph.neighbors[i]
        if sources:
            messages = []
            for j in sources:
                warped = bilinear_warp(
                    emb[j], local, local,
                    relative_transform(actor.pose, actors[j].pose), tape)
                pair = concat_channels([emb[i], warped], tape)
                messages.append(_stack_forward(pair, params.f_actor, tape, "conv"))
            aggregated = max_reduce(messages, tape)
            message = _stack_forward(aggregated, params.f_deconv, tape, "deconv")
        else:
            message = _zero_message(c)
        state = conv_gru_step(actor.state, message, params.u_actor, tape)
        updated.append(ActorState(state, actor.pose))
    return updated


def actor_to_scene_round(actors: list[ActorState], scene: GridTensor,
                         state_grid: GridSpec, params: InteractionParams,
                         tape: Tape | None = None) -> GridTensor:
    """Per-actor canvases in the scene frame, max-aggregated, scene GRU."""
    c = params.config
    local = c.actor_grid
    canvases = []
    for actor in actors:
        feat = _stack_forward(actor.state, params.f_instance, tape, "conv")
        canvases.append(bilinear_warp(
            feat, local, state_grid,
            relative_transform(Pose2D(0.0, 0.0, 0.0), actor.pose), tape))
    if canvases:
        aggregate = max_reduce(canvases, tape)
    else:
        aggregate = GridTensor.zeros((c.msg_channels, state_grid.rows,
                                      state_grid.cols))
    return conv_gru_step(scene, aggregate, params.u_scene, tape)


def scene_to_actor_round(actors: list[ActorState], prev_scene: GridTensor,
                         state_grid: GridSpec, params: InteractionParams,
                         tape: Tape | None = None) -> list[ActorState]:
    """Reads the scene state from before this round's update."""
    c = params.config
    local = c.actor_grid
    updated = []
    for actor in actors:
        roi = roi_align(prev_scene, state_grid, actor_box(actor.pose, local),
                        local.rows, local.cols, c.roi_samples, tape)
        pair = concat_channels([roi, actor.state], tape)
        message = _stack_forward(pair, params.f_scene, tape, "conv")
        state = conv_gru_step(actor.state, message, params.u_actor, tape)
        updated.append(ActorState(state, actor.pose))
    return updated


def run_message_passing(actors: list[ActorState], scene: GridTensor,
                        graph: InteractionGraph, state_grid: GridSpec,
                        params: InteractionParams, rounds: int | None = None,
                        tape: Tape | None = None, use_scene: bool = True,
                        use_s2a: bool = True
                        ) -> tuple[list[ActorState], GridTensor]:
    """Sequential rounds of a2a, a2s, s2a; zero rounds is the identity."""
    k = params.config.mp_rounds if rounds is None else rounds
    if k < 0:
        raise InteractionError("round count must be >= 0")
    for _ in range(k):
        prev_scene = scene
        actors = actor_to_actor_round(actors, graph, params, tape)
        if use_scene:
            scene = actor_to_scene_round(actors, scene, state_grid, params, tape)
            if use_s2a:
                actors = scene_to_actor_round(actors, prev_scene, state_grid,
                                              params, tape)
    return actors, scene


# ---------------------------------------------------------------------------
# output heads and occupancy aggregation


def actor_head(state: GridTensor, params: InteractionParams,
               tape: Tape | None = None) -> GridTensor:
    """Per-timestep spatial pmf over the actor grid."""
    logits = _stack_forward(state, params.o_actor, tape, "conv")
    return softmax_spatial(logits, tape)


def warp_pmf_to_scene(pmf: GridTensor, pose: Pose2D, actor_grid: GridSpec,
                      scene_grid: GridSpec,
                      tape: Tape | None = None) -> GridTensor:
    """Bilinear warp into the scene grid, renormalized per timestep so the
    warped mass equals the source mass that lands inside the scene."""
    warped = bilinear_warp(pmf, actor_grid, scene_grid,
                           relative_transform(Pose2D(0.0, 0.0, 0.0), pose), tape)
    centers = cell_centers(actor_grid).reshape(-1, 2)
    world = pose_to_world(pose).apply(centers)
    half_w = scene_grid.cols * scene_grid.resolution / 2.0
    half_h = scene_grid.rows * scene_grid.resolution / 2.0
    inside = ((np.abs(world[:, 0] - scene_grid.origin_x) <= half_w)
              & (np.abs(world[:, 1] - scene_grid.origin_y) <= half_h))
    mask = inside.reshape(actor_grid.rows, actor_grid.cols).astype(np.float64)
    masses = masked_slice_sum(pmf, mask, tape)
    return rescale_slices(warped, masses, tape)


def aggregate_occupancy(warped_pmfs: list[GridTensor],
                        tape: Tape | None = None) -> GridTensor:
    """Complement-product union; a single actor passes through unchanged."""
    if not warped_pmfs:
        raise InteractionError("aggregate_occupancy needs at least one actor")
    return independent_union(warped_pmfs, tape)


def scene_head(scene_state: GridTensor, p_agg_state_res: GridTensor,
               params: InteractionParams,
               tape: Tape | None = None) -> GridTensor:
    """Occupancy probabilities: conv + stride-2 deconvs + sigmoid."""
    x = concat_channels([scene_state, p_agg_state_res], tape)
    x = relu(conv2d(x, params.o_scene[0], tape), tape)
    for i, spec in enumerate(params.o_scene[1:]):
        x = deconv2d(x, spec, tape)
        if i + 2 < len(params.o_scene):
            x = relu(x, tape)
    return sigmoid(x, tape)


def resample_to_state_grid(p_agg: GridTensor, scene_grid: GridSpec,
                           state_grid: GridSpec,
                           tape: Tape | None = None) -> GridTensor:
    return bilinear_warp(p_agg, scene_grid, state_grid,
                         AffineTransform.identity(), tape)

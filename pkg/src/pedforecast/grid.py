"""Dense-grid tensor ops with hand-written reverse-mode gradients.

All math runs on float64 numpy arrays wrapped in :class:`GridTensor`. Ops are
plain functions; when a :class:`Tape` is passed they append a backward closure
to it, and ``Tape.backward(loss)`` replays the closures in reverse to
accumulate gradients into every tensor that participated. There is no
operator overloading and no broadcasting beyond what individual ops document.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import (AffineTransform, GeometryError, GridSpec, RotatedBox,
                       cell_centers, frac_index, pose_to_world)


class ShapeError(ValueError):
    """Operands do not satisfy an op's shape contract."""


class NumericalError(ArithmeticError):
    """A non-finite value showed up where it must not."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening after every op (slow; meant for tests)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class GridTensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        # asarray with order="C", not ascontiguousarray: the latter turns
        # rank-0 data into rank-1 and scalar losses must stay rank 0
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape) -> "GridTensor":
        return cls(np.zeros(shape, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"GridTensor(shape={self.shape})"


class Tape:
    """Records backward closures in forward order."""

    __slots__ = ("_nodes",)

    def __init__(self) -> None:
        self._nodes: list[Callable[[], None]] = []

    def record(self, backward: Callable[[], None]) -> None:
        self._nodes.append(backward)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: GridTensor) -> None:
        """Pull gradients of ``loss`` back through everything recorded."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericalError("loss is not finite")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            node()


def accumulate_grad(t: GridTensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grads(tensors: Iterable[GridTensor]) -> None:
    for t in tensors:
        t.grad = None


def _finish(data: np.ndarray, op: str) -> GridTensor:
    if _debug_checks and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    return GridTensor(data)


def conv_named_parameters(prefix: str, spec) -> dict:
    """Checkpoint names for a ConvSpec's tensors."""
    out = {f"{prefix}/w": spec.weights}
    if spec.bias is not None:
        out[f"{prefix}/b"] = spec.bias
    return out


def gru_named_parameters(prefix: str, spec) -> dict:
    out = {}
    for name, gate in (("reset", spec.reset), ("update", spec.update),
                       ("candidate", spec.candidate)):
        out.update(conv_named_parameters(f"{prefix}/{name}", gate))
    return out


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"convolution output size {out} < 1 "
            f"(input {size}, kernel {kernel}, stride {stride}, padding {padding})")
    return out


@dataclass
class ConvSpec:
    """Weights and geometry for one convolution layer.

    ``weights`` has shape (out_channels, in_channels, kernel_h, kernel_w).
    ``bias`` is per-output-channel: shape (out_channels,) when the spec is
    used with conv2d, shape (in_channels,) when used with deconv2d (whose
    output has in_channels channels).
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    weights: GridTensor
    bias: GridTensor | None = None

    def __post_init__(self) -> None:
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        expect = (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        if self.weights.shape != expect:
            raise ShapeError(f"weights shape {self.weights.shape} != {expect}")
        if self.bias is not None and self.bias.shape not in (
                (self.out_channels,), (self.in_channels,)):
            raise ShapeError(
                f"bias shape {self.bias.shape} fits neither conv ({self.out_channels},) "
                f"nor deconv ({self.in_channels},) orientation")

    def parameters(self) -> list[GridTensor]:
        return [self.weights] if self.bias is None else [self.weights, self.bias]


def make_conv_spec(rng: np.random.Generator, in_channels: int, out_channels: int,
                   kernel: int | tuple[int, int], stride: int = 1, padding: int = 0,
                   bias: bool = True, scale: float | None = None) -> ConvSpec:
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    std = scale if scale is not None else math.sqrt(2.0 / (in_channels * kh * kw))
    w = GridTensor(rng.normal(0.0, std, size=(out_channels, in_channels, kh, kw)))
    b = GridTensor(np.zeros(out_channels)) if bias else None
    return ConvSpec(in_channels, out_channels, kh, kw, stride, padding, w, b)


def make_deconv_spec(rng: np.random.Generator, from_channels: int, to_channels: int,
                     kernel: int | tuple[int, int], stride: int = 1, padding: int = 0,
                     bias: bool = True) -> ConvSpec:
    """Spec for a transposed-convolution layer mapping from_channels -> to_channels.

    deconv2d runs the adjoint of conv2d, so the spec is built in conv
    orientation (in=to_channels, out=from_channels) with a deconv-side bias.
    """
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    std = math.sqrt(2.0 / (from_channels * kh * kw))
    w = GridTensor(rng.normal(0.0, std, size=(from_channels, to_channels, kh, kw)))
    b = GridTensor(np.zeros(to_channels)) if bias else None
    return ConvSpec(to_channels, from_channels, kh, kw, stride, padding, w, b)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _scatter_windows(target_pad: np.ndarray, values: np.ndarray, w: np.ndarray,
                     stride: int) -> None:
    """target_pad[c, i*s+u, j*s+v] += sum_o values[o,i,j] * w[o,c,u,v]."""
    _, hh, ww = values.shape
    kh, kw = w.shape[2], w.shape[3]
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(w[:, :, u, v], values, axes=([0], [0]))
            target_pad[:, u:u + hh * stride:stride, v:v + ww * stride:stride] += contrib


def conv2d(x: GridTensor, spec: ConvSpec, tape: Tape | None = None) -> GridTensor:
    """Strided cross-correlation with bias: (C,H,W) -> (C',H',W')."""
    if x.data.ndim != 3 or x.data.shape[0] != spec.in_channels:
        raise ShapeError(
            f"conv2d input shape {x.shape} incompatible with spec "
            f"({spec.in_channels} in-channels expected)")
    if spec.bias is not None and spec.bias.shape != (spec.out_channels,):
        raise ShapeError(
            f"conv2d bias must have shape ({spec.out_channels},), got {spec.bias.shape}")
    _, h, w_in = x.data.shape
    conv_output_size(h, spec.kernel_h, spec.stride, spec.padding)
    conv_output_size(w_in, spec.kernel_w, spec.stride, spec.padding)
    p = spec.padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    win = _windows(xp, spec.kernel_h, spec.kernel_w, spec.stride)
    out_data = np.tensordot(spec.weights.data, win, axes=([1, 2, 3], [0, 3, 4]))
    if spec.bias is not None:
        out_data = out_data + spec.bias.data[:, None, None]
    out = _finish(out_data, "conv2d")

    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = out.grad
            if spec.bias is not None:
                accumulate_grad(spec.bias, g.sum(axis=(1, 2)))
            accumulate_grad(spec.weights,
                            np.tensordot(g, win, axes=([1, 2], [1, 2])))
            gxp = np.zeros_like(xp)
            _scatter_windows(gxp, g, spec.weights.data, spec.stride)
            accumulate_grad(x, gxp[:, p:p + h, p:p + w_in] if p else gxp)
        tape.record(backward)
    return out


def deconv2d(y: GridTensor, spec: ConvSpec, tape: Tape | None = None) -> GridTensor:
    """Transposed convolution: the exact adjoint of conv2d with the same spec.

    Maps (out_channels, H', W') -> (in_channels, H, W) where
    H = (H'-1)*stride + kernel_h - 2*padding. The adjoint identity
    <conv2d(x), y> == <x, deconv2d(y)> holds for bias-free specs; a bias of
    shape (in_channels,) is added to the output when present.
    """
    if y.data.ndim != 3 or y.data.shape[0] != spec.out_channels:
        raise ShapeError(
            f"deconv2d input shape {y.shape} incompatible with spec "
            f"({spec.out_channels} channels expected)")
    if spec.bias is not None and spec.bias.shape != (spec.in_channels,):
        raise ShapeError(
            f"deconv2d bias must have shape ({spec.in_channels},), got {spec.bias.shape}")
    _, hh, ww = y.data.shape
    p = spec.padding
    h_out = (hh - 1) * spec.stride + spec.kernel_h - 2 * p
    w_out = (ww - 1) * spec.stride + spec.kernel_w - 2 * p
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"deconv2d output size {h_out}x{w_out} < 1")
    out_pad = np.zeros((spec.in_channels, h_out + 2 * p, w_out + 2 * p))
    _scatter_windows(out_pad, y.data, spec.weights.data, spec.stride)
    out_data = out_pad[:, p:p + h_out, p:p + w_out] if p else out_pad
    if spec.bias is not None:
        out_data = out_data + spec.bias.data[:, None, None]
    out = _finish(out_data, "deconv2d")

    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = out.grad
            if spec.bias is not None:
                accumulate_grad(spec.bias, g.sum(axis=(1, 2)))
            gp = np.pad(g, ((0, 0), (p, p), (p, p))) if p else g
            win = _windows(gp, spec.kernel_h, spec.kernel_w, spec.stride)
            accumulate_grad(y, np.tensordot(spec.weights.data, win,
                                            axes=([1, 2, 3], [0, 3, 4])))
            accumulate_grad(spec.weights,
                            np.tensordot(y.data, win, axes=([1, 2], [1, 2])))
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# convolutional GRU


@dataclass
class ConvGRUSpec:
    """Gate convolutions for a ConvGRU cell.

    Every gate convolves the channel concatenation [input, state] (input
    first) with stride 1 and same-padding, so states keep their spatial size.
    """

    state_channels: int
    input_channels: int
    reset: ConvSpec
    update: ConvSpec
    candidate: ConvSpec

    def __post_init__(self) -> None:
        combined = self.state_channels + self.input_channels
        for name, spec in (("reset", self.reset), ("update", self.update),
                           ("candidate", self.candidate)):
            if spec.in_channels != combined or spec.out_channels != self.state_channels:
                raise ShapeError(
                    f"{name} gate must map {combined} -> {self.state_channels} channels")
            if spec.stride != 1 or spec.kernel_h != 2 * spec.padding + 1:
                raise ShapeError(f"{name} gate must be stride-1 with same-padding")

    def parameters(self) -> list[GridTensor]:
        return (self.reset.parameters() + self.update.parameters()
                + self.candidate.parameters())


def make_conv_gru_spec(rng: np.random.Generator, state_channels: int,
                       input_channels: int, kernel: int = 3) -> ConvGRUSpec:
    if kernel % 2 != 1:
        raise ShapeError(f"ConvGRU kernel must be odd, got {kernel}")
    combined = state_channels + input_channels
    pad = kernel // 2
    std = math.sqrt(1.0 / (combined * kernel * kernel))
    gates = [make_conv_spec(rng, combined, state_channels, kernel, 1, pad, scale=std)
             for _ in range(3)]
    return ConvGRUSpec(state_channels, input_channels, *gates)


def conv_gru_step(h: GridTensor, x: GridTensor, spec: ConvGRUSpec,
                  tape: Tape | None = None) -> GridTensor:
    """One gated recurrent update of a spatial state.

    z = sigmoid(conv([x, h])), r = sigmoid(conv([x, h])),
    candidate = tanh(conv([x, r*h])), new state = (1 - z)*h + z*candidate.
    """
    if h.data.ndim != 3 or h.shape[0] != spec.state_channels:
        raise ShapeError(f"state shape {h.shape} does not carry "
                         f"{spec.state_channels} channels")
    if x.data.ndim != 3 or x.shape[0] != spec.input_channels:
        raise ShapeError(f"input shape {x.shape} does not carry "
                         f"{spec.input_channels} channels")
    if h.shape[1:] != x.shape[1:]:
        raise ShapeError(f"state {h.shape} and input {x.shape} spatial dims differ")
    hx = concat_channels([x, h], tape)
    z = sigmoid(conv2d(hx, spec.update, tape), tape)
    r = sigmoid(conv2d(hx, spec.reset, tape), tape)
    gated = concat_channels([x, mul(r, h, tape)], tape)
    candidate = tanh(conv2d(gated, spec.candidate, tape), tape)
    # h + z*(candidate - h) == (1-z)*h + z*candidate
    return add(h, mul(z, sub(candidate, h, tape), tape), tape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(a: GridTensor, b: GridTensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: GridTensor, b: GridTensor, tape: Tape | None = None) -> GridTensor:
    _same_shape(a, b, "add")
    out = _finish(a.data + b.data, "add")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(a, out.grad)
            accumulate_grad(b, out.grad)
        tape.record(backward)
    return out


def sub(a: GridTensor, b: GridTensor, tape: Tape | None = None) -> GridTensor:
    _same_shape(a, b, "sub")
    out = _finish(a.data - b.data, "sub")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(a, out.grad)
            accumulate_grad(b, -out.grad)
        tape.record(backward)
    return out


def mul(a: GridTensor, b: GridTensor, tape: Tape | None = None) -> GridTensor:
    _same_shape(a, b, "mul")
    out = _finish(a.data * b.data, "mul")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(a, out.grad * b.data)
            accumulate_grad(b, out.grad * a.data)
        tape.record(backward)
    return out


def scale(x: GridTensor, factor: float, tape: Tape | None = None) -> GridTensor:
    out = _finish(x.data * factor, "scale")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(x, out.grad * factor)
        tape.record(backward)
    return out


def relu(x: GridTensor, tape: Tape | None = None) -> GridTensor:
    out = _finish(np.maximum(x.data, 0.0), "relu")
    if tape is not None:
        mask = x.data > 0.0
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(x, out.grad * mask)
        tape.record(backward)
    return out


def sigmoid(x: GridTensor, tape: Tape | None = None) -> GridTensor:
    # two-branch form avoids overflow for large |x|
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _finish(out_data, "sigmoid")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(x, out.grad * out.data * (1.0 - out.data))
        tape.record(backward)
    return out


def tanh(x: GridTensor, tape: Tape | None = None) -> GridTensor:
    out = _finish(np.tanh(x.data), "tanh")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(x, out.grad * (1.0 - out.data * out.data))
        tape.record(backward)
    return out


def concat_channels(parts: Sequence[GridTensor], tape: Tape | None = None) -> GridTensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat_channels: trailing dims differ ({p.shape[1:]} vs {tail})")
    out = _finish(np.concatenate([p.data for p in parts], axis=0), "concat_channels")
    if tape is not None:
        sizes = [p.shape[0] for p in parts]
        def backward() -> None:
            if out.grad is None:
                return
            start = 0
            for p, n in zip(parts, sizes):
                accumulate_grad(p, out.grad[start:start + n])
                start += n
        tape.record(backward)
    return out


def slice_channels(x: GridTensor, start: int, stop: int,
                   tape: Tape | None = None) -> GridTensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_channels [{start}:{stop}] invalid for shape {x.shape}")
    out = _finish(x.data[start:stop].copy(), "slice_channels")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            accumulate_grad(x, g)
        tape.record(backward)
    return out


def add_channel_bias(x: GridTensor, bias: GridTensor,
                     tape: Tape | None = None) -> GridTensor:
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[0]:
        raise ShapeError(f"bias shape {bias.shape} does not match {x.shape[0]} channels")
    shape = (x.shape[0],) + (1,) * (x.data.ndim - 1)
    out = _finish(x.data + bias.data.reshape(shape), "add_channel_bias")
    if tape is not None:
        axes = tuple(range(1, x.data.ndim))
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(x, out.grad)
            accumulate_grad(bias, out.grad.sum(axis=axes) if axes else out.grad)
        tape.record(backward)
    return out


def gather_pixels(x: GridTensor, rows: np.ndarray, cols: np.ndarray,
                  tape: Tape | None = None) -> GridTensor:
    """Pick per-channel values at (row, col) positions: (C,H,W) -> (C,n)."""
    if x.data.ndim != 3:
        raise ShapeError(f"gather_pixels needs a (C,H,W) tensor, got {x.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _, h, w = x.shape
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("rows and cols must be equal-length 1D arrays")
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise ShapeError("gather_pixels indices out of range")
    out = _finish(x.data[:, rows, cols].copy(), "gather_pixels")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = np.zeros_like(x.data)
            np.add.at(g, (slice(None), rows, cols), out.grad)
            accumulate_grad(x, g)
        tape.record(backward)
    return out


def sum_all(x: GridTensor, tape: Tape | None = None) -> GridTensor:
    out = _finish(np.asarray(x.data.sum()), "sum_all")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(x, np.full_like(x.data, float(out.grad)))
        tape.record(backward)
    return out


def weighted_sum(scalars: Sequence[GridTensor], weights: Sequence[float],
                 tape: Tape | None = None) -> GridTensor:
    if len(scalars) != len(weights):
        raise ShapeError("weighted_sum: one weight per scalar required")
    for s in scalars:
        if s.data.size != 1:
            raise ShapeError(f"weighted_sum operates on scalars, got shape {s.shape}")
    total = sum(w * float(s.data.reshape(())) for s, w in zip(scalars, weights))
    out = _finish(np.asarray(total), "weighted_sum")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = float(out.grad)
            for s, w in zip(scalars, weights):
                accumulate_grad(s, np.full_like(s.data, g * w))
        tape.record(backward)
    return out


def max_reduce(parts: Sequence[GridTensor], tape: Tape | None = None) -> GridTensor:
    """Elementwise maximum across tensors of identical shape.

    The forward value is order-free bitwise; gradients route to the first
    tensor attaining the maximum at each element.
    """
    if not parts:
        raise ShapeError("max_reduce needs at least one tensor")
    for p in parts[1:]:
        _same_shape(parts[0], p, "max_reduce")
    stacked = np.stack([p.data for p in parts])
    winner = stacked.argmax(axis=0)
    out = _finish(np.take_along_axis(stacked, winner[None], axis=0)[0], "max_reduce")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            for i, p in enumerate(parts):
                accumulate_grad(p, out.grad * (winner == i))
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# normalization and softmax


def group_norm(x: GridTensor, groups: int, gamma: GridTensor, beta: GridTensor,
               eps: float = 1e-5, tape: Tape | None = None) -> GridTensor:
    """Per-group standardization with per-channel affine parameters."""
    if x.data.ndim != 3:
        raise ShapeError(f"group_norm needs a (C,H,W) tensor, got {x.shape}")
    c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"groups={groups} must divide {c} channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma and beta must be per-channel vectors")
    grouped = x.data.reshape(groups, -1)
    mean = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = ((grouped - mean) * inv_std).reshape(c, h, w)
    out = _finish(gamma.data[:, None, None] * y + beta.data[:, None, None], "group_norm")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = out.grad
            accumulate_grad(gamma, (g * y).sum(axis=(1, 2)))
            accumulate_grad(beta, g.sum(axis=(1, 2)))
            dy = (g * gamma.data[:, None, None]).reshape(groups, -1)
            yg = y.reshape(groups, -1)
            m1 = dy.mean(axis=1, keepdims=True)
            m2 = (dy * yg).mean(axis=1, keepdims=True)
            dx = inv_std * (dy - m1 - yg * m2)
            accumulate_grad(x, dx.reshape(c, h, w))
        tape.record(backward)
    return out


def softmax_spatial(logits: GridTensor, tape: Tape | None = None) -> GridTensor:
    """Softmax over the spatial cells of each leading slice: (T,h,w) -> (T,h,w)."""
    if logits.data.ndim != 3:
        raise ShapeError(f"softmax_spatial needs a (T,h,w) tensor, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=(1, 2), keepdims=True)
    e = np.exp(shifted)
    out = _finish(e / e.sum(axis=(1, 2), keepdims=True), "softmax_spatial")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = out.grad
            dot = (g * out.data).sum(axis=(1, 2), keepdims=True)
            accumulate_grad(logits, out.data * (g - dot))
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# bilinear sampling: warps and rotated RoI extraction


def _bilinear_corners(rows_f: np.ndarray, cols_f: np.ndarray, h: int, w: int):
    """Corner (row, col, weight) triples for zero-padded bilinear sampling."""
    r0 = np.floor(rows_f).astype(np.int64)
    c0 = np.floor(cols_f).astype(np.int64)
    wr = rows_f - r0
    wc = cols_f - c0
    corners = []
    for dr, dc, weight in ((0, 0, (1.0 - wr) * (1.0 - wc)),
                           (0, 1, (1.0 - wr) * wc),
                           (1, 0, wr * (1.0 - wc)),
                           (1, 1, wr * wc)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        corners.append((np.where(valid, rr, 0), np.where(valid, cc, 0),
                        np.where(valid, weight, 0.0)))
    return corners


def _bilinear_gather(src: np.ndarray, corners) -> np.ndarray:
    out = None
    for rr, cc, weight in corners:
        term = src[:, rr, cc] * weight[None, :]
        out = term if out is None else out + term
    return out


def _bilinear_scatter(gsrc: np.ndarray, corners, g: np.ndarray) -> None:
    c = gsrc.shape[0]
    chan = np.arange(c)[:, None]
    for rr, cc, weight in corners:
        np.add.at(gsrc, (chan, rr[None, :], cc[None, :]), g * weight[None, :])


def bilinear_warp(src: GridTensor, src_grid: GridSpec, out_grid: GridSpec,
                  out_to_src: AffineTransform, tape: Tape | None = None) -> GridTensor:
    """Resample src into out_grid: every output cell center is mapped through
    ``out_to_src`` into the source frame and bilinearly interpolated, with
    zero-padding semantics outside the source grid."""
    if src.data.ndim != 3:
        raise ShapeError(f"bilinear_warp needs a (C,H,W) tensor, got {src.shape}")
    if src.data.shape[1:] != (src_grid.rows, src_grid.cols):
        raise ShapeError(f"src shape {src.shape} does not match grid {src_grid.shape}")
    if abs(out_to_src.determinant) <= 1e-12:
        raise GeometryError("bilinear_warp transform is singular")
    centers = cell_centers(out_grid).reshape(-1, 2)
    src_pts = out_to_src.apply(centers)
    rows_f, cols_f = frac_index(src_grid, src_pts[:, 0], src_pts[:, 1])
    corners = _bilinear_corners(rows_f, cols_f, src_grid.rows, src_grid.cols)
    flat = _bilinear_gather(src.data, corners)
    out = _finish(flat.reshape(src.shape[0], out_grid.rows, out_grid.cols), "bilinear_warp")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            gsrc = np.zeros_like(src.data)
            _bilinear_scatter(gsrc, corners, out.grad.reshape(src.shape[0], -1))
            accumulate_grad(src, gsrc)
        tape.record(backward)
    return out


def roi_align(src: GridTensor, src_grid: GridSpec, box: RotatedBox,
              out_h: int, out_w: int, samples_per_cell: int = 2,
              tape: Tape | None = None) -> GridTensor:
    """Extract a rotated box from src as an (C, out_h, out_w) map.

    Each output cell averages samples_per_cell^2 bilinear samples laid out on
    a regular sub-grid of the cell in the box's local frame. Samples falling
    outside the source grid contribute zero.
    """
    if src.data.ndim != 3:
        raise ShapeError(f"roi_align needs a (C,H,W) tensor, got {src.shape}")
    if src.data.shape[1:] != (src_grid.rows, src_grid.cols):
        raise ShapeError(f"src shape {src.shape} does not match grid {src_grid.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size {out_h}x{out_w} must be positive")
    if samples_per_cell < 1:
        raise ShapeError(f"samples_per_cell must be >= 1, got {samples_per_cell}")
    spc = samples_per_cell
    sub = (np.arange(spc) + 0.5) / spc
    xs = -box.extent_x / 2.0 + (np.arange(out_w)[:, None] + sub[None, :]).reshape(-1) \
        * (box.extent_x / out_w)
    ys = -box.extent_y / 2.0 + (np.arange(out_h)[:, None] + sub[None, :]).reshape(-1) \
        * (box.extent_y / out_h)
    xg, yg = np.meshgrid(xs, ys)
    local = np.stack([xg.reshape(-1), yg.reshape(-1)], axis=1)
    world = pose_to_world(box.pose).apply(local)
    rows_f, cols_f = frac_index(src_grid, world[:, 0], world[:, 1])
    corners = _bilinear_corners(rows_f, cols_f, src_grid.rows, src_grid.cols)
    c = src.shape[0]
    flat = _bilinear_gather(src.data, corners)
    samples = flat.reshape(c, out_h, spc, out_w, spc)
    out = _finish(samples.mean(axis=(2, 4)), "roi_align")
    if tape is not None:
        inv_n = 1.0 / (spc * spc)
        def backward() -> None:
            if out.grad is None:
                return
            g = np.broadcast_to(out.grad[:, :, None, :, None] * inv_n,
                                (c, out_h, spc, out_w, spc)).reshape(c, -1)
            gsrc = np.zeros_like(src.data)
            _bilinear_scatter(gsrc, corners, g)
            accumulate_grad(src, gsrc)
        tape.record(backward)
    return out


def coord_channels(h: int, w: int) -> GridTensor:
    """Constant (2,h,w) tensor of normalized x (channel 0) and y (channel 1)
    cell coordinates in [-1, 1]; a degenerate axis yields zeros."""
    if h < 1 or w < 1:
        raise ShapeError(f"coord_channels needs positive dims, got {h}x{w}")
    xs = np.zeros(w) if w == 1 else 2.0 * np.arange(w) / (w - 1) - 1.0
    ys = np.zeros(h) if h == 1 else 2.0 * np.arange(h) / (h - 1) - 1.0
    out = np.empty((2, h, w))
    out[0] = xs[None, :]
    out[1] = ys[:, None]
    return GridTensor(out)


# ---------------------------------------------------------------------------
# probability-map utilities


def masked_slice_sum(x: GridTensor, mask: np.ndarray,
                     tape: Tape | None = None) -> GridTensor:
    """Per-slice masked sums: (T,h,w) with (h,w) mask -> (T,)."""
    if x.data.ndim != 3 or mask.shape != x.data.shape[1:]:
        raise ShapeError(f"masked_slice_sum: mask {mask.shape} vs tensor {x.shape}")
    m = mask.astype(np.float64)
    out = _finish((x.data * m[None]).sum(axis=(1, 2)), "masked_slice_sum")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            accumulate_grad(x, out.grad[:, None, None] * m[None])
        tape.record(backward)
    return out


def rescale_slices(x: GridTensor, target_masses: GridTensor,
                   tape: Tape | None = None) -> GridTensor:
    """Scale each (h,w) slice of x so it sums to the matching target mass.

    Slices with non-positive current mass come out all-zero (and pass no
    gradient), which covers maps that were warped fully out of bounds.
    """
    if x.data.ndim != 3 or target_masses.shape != (x.shape[0],):
        raise ShapeError(
            f"rescale_slices: masses {target_masses.shape} vs tensor {x.shape}")
    sums = x.data.sum(axis=(1, 2))
    live = sums > 0.0
    alpha = np.where(live, target_masses.data / np.where(live, sums, 1.0), 0.0)
    out = _finish(x.data * alpha[:, None, None], "rescale_slices")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            g = out.grad
            gx_dot = (g * x.data).sum(axis=(1, 2))
            safe_sums = np.where(live, sums, 1.0)
            gx = alpha[:, None, None] * (g - (gx_dot / safe_sums)[:, None, None])
            gx[~live] = 0.0
            accumulate_grad(x, gx)
            gm = np.where(live, gx_dot / safe_sums, 0.0)
            accumulate_grad(target_masses, gm)
        tape.record(backward)
    return out


def independent_union(parts: Sequence[GridTensor],
                      tape: Tape | None = None) -> GridTensor:
    """Combine per-source occupancy maps as 1 - prod(1 - p_i).

    A single source passes through untouched. With several sources the
    complement factors are multiplied in sorted value order per cell, so the
    result is bitwise invariant to the order of ``parts``.
    """
    if not parts:
        raise ShapeError("independent_union needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    for p in parts[1:]:
        _same_shape(parts[0], p, "independent_union")
    q = np.stack([1.0 - p.data for p in parts])
    order = np.argsort(q, axis=0, kind="stable")
    qs = np.take_along_axis(q, order, axis=0)
    prefix = np.ones_like(qs)
    np.cumprod(qs[:-1], axis=0, out=prefix[1:])
    suffix = np.ones_like(qs)
    suffix[:-1] = np.cumprod(qs[::-1], axis=0)[::-1][1:]
    out = _finish(1.0 - prefix[-1] * qs[-1], "independent_union")
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            partial = np.empty_like(qs)
            np.put_along_axis(partial, order, prefix * suffix, axis=0)
            for i, p in enumerate(parts):
                accumulate_grad(p, out.grad * partial[i])
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_error: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        lines = [f"  {name}: {err:.3e}" for name, err in self.per_param.items()]
        status = "PASS" if self.passed else "FAIL"
        return (f"grad check {status} (max rel err {self.max_rel_error:.3e}, "
                f"tol {self.tolerance:.1e})\n" + "\n".join(lines))


def grad_check(f: Callable[[Tape | None], GridTensor], params: dict[str, GridTensor],
               step: float = 1e-5, tolerance: float = 1e-4,
               max_checks_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` must rebuild its forward pass on each call; with ``tape=None`` it
    runs forward-only. Relative error uses max(1, |a|, |n|) in the
    denominator so near-zero gradients are judged on absolute error.
    """
    zero_grads(params.values())
    tape = Tape()
    loss = f(tape)
    tape.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_checks_per_param is not None and n > max_checks_per_param:
            picker = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(picker.choice(n, size=max_checks_per_param, replace=False))
        else:
            indices = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            up = float(f(None).data.reshape(()))
            flat[i] = original - step
            down = float(f(None).data.reshape(()))
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            rel = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
            if rel > worst:
                worst = rel
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(per_param, max_err, tolerance, max_err <= tolerance)

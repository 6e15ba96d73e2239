"""Self-describing plot outputs: PGM heatmaps and SVG curves.

No plotting dependency; every artifact is a format a test can parse back
(binary P5 PGM, plain SVG). Probability heatmaps map 0..1 to gray 0..255,
one file per forecast timestep, north (+y) up.
"""
import math
import os

import numpy as np


class RenderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 grayscale; input is probabilities in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise RenderError("image must be 2D")
    if not np.all(np.isfinite(img)):
        raise RenderError("image contains non-finite values")
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise RenderError("image values must lie in [0, 1]")
    gray = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise RenderError("not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":   # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise RenderError("only 8-bit PGM supported")
    pos += 1
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise RenderError("truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def heatmap_path(prefix, t: int) -> str:
    return f"{prefix}_t{t:02d}.pgm"


def render_heatmaps(prefix, forecast: np.ndarray) -> list[str]:
    """One PGM per timestep; grid row 0 is south so the image is flipped."""
    fc = np.asarray(forecast, dtype=np.float64)
    if fc.ndim != 3:
        raise RenderError("forecast must be (T, rows, cols)")
    paths = []
    for t in range(fc.shape[0]):
        path = heatmap_path(prefix, t)
        write_pgm(path, fc[t][::-1, :])
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# SVG

_W, _H = 480, 360
_ML, _MR, _MT, _MB = 56, 16, 28, 44


def _sx(x: float) -> float:
    return _ML + x * (_W - _ML - _MR)


def _sy(y: float) -> float:
    return _H - _MB - y * (_H - _MT - _MB)


def _axes(title: str, xlabel: str, ylabel: str) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
        f'height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, y = _sx(v), _sy(v)
        parts.append(f'<line x1="{x:.1f}" y1="{_sy(0):.1f}" x2="{x:.1f}" '
                     f'y2="{_sy(0) + 4:.1f}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{_sy(0) + 16:.1f}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{v:g}</text>')
        parts.append(f'<line x1="{_sx(0):.1f}" y1="{y:.1f}" '
                     f'x2="{_sx(0) - 4:.1f}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{_sx(0) - 7:.1f}" y="{y + 3:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{v:g}</text>')
    parts.append(f'<rect x="{_sx(0):.1f}" y="{_sy(1):.1f}" '
                 f'width="{_sx(1) - _sx(0):.1f}" '
                 f'height="{_sy(0) - _sy(1):.1f}" fill="none" '
                 f'stroke="black"/>')
    parts.append(f'<text x="{(_sx(0) + _sx(1)) / 2:.1f}" y="{_H - 8}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="11">{xlabel}</text>')
    parts.append(f'<text x="14" y="{(_sy(0) + _sy(1)) / 2:.1f}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="11" transform="rotate(-90 14 '
                 f'{(_sy(0) + _sy(1)) / 2:.1f})">{ylabel}</text>')
    return parts


def svg_pr_curve(recall, precision, path, ap: float | None = None) -> None:
    r = np.asarray(recall, dtype=np.float64)
    p = np.asarray(precision, dtype=np.float64)
    if r.shape != p.shape:
        raise RenderError("recall and precision must align")
    title = "precision-recall"
    if ap is not None:
        title += f" (AP {ap:.4f})"
    parts = _axes(title, "recall", "precision")
    if r.size:
        points = " ".join(f"{_sx(x):.2f},{_sy(y):.2f}"
                          for x, y in zip(r, p))
        parts.append(f'<polyline points="{points}" fill="none" '
                     f'stroke="#1f6fb2" stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def svg_reliability(mean_confidence, accuracy, count, path,
                    ace: float | None = None,
                    mce: float | None = None) -> None:
    """Per-bin accuracy bars against the y=x diagonal."""
    conf = list(mean_confidence)
    acc = list(accuracy)
    cnt = list(count)
    bins = len(acc)
    if not (len(conf) == len(cnt) == bins and bins > 0):
        raise RenderError("reliability arrays must align")
    title = "reliability"
    if ace is not None and mce is not None:
        title += f" (ACE {ace:.4f}, MCE {mce:.4f})"
    parts = _axes(title, "confidence", "accuracy")
    parts.append(f'<line x1="{_sx(0):.1f}" y1="{_sy(0):.1f}" '
                 f'x2="{_sx(1):.1f}" y2="{_sy(1):.1f}" stroke="#999" '
                 f'stroke-dasharray="4 3"/>')
    width = 1.0 / bins
    for b in range(bins):
        if cnt[b] == 0:
            continue
        x0, x1 = _sx(b * width + 0.08 * width), _sx((b + 1) * width
                                                    - 0.08 * width)
        y0, y1 = _sy(0), _sy(acc[b])
        parts.append(f'<rect x="{x0:.2f}" y="{min(y0, y1):.2f}" '
                     f'width="{x1 - x0:.2f}" '
                     f'height="{abs(y0 - y1):.2f}" fill="#7fb3d5" '
                     f'stroke="#1f6fb2"/>')
        if conf[b] is not None and not (isinstance(conf[b], float)
                                        and math.isnan(conf[b])):
            cx = _sx(conf[b])
            parts.append(f'<circle cx="{cx:.2f}" cy="{_sy(acc[b]):.2f}" '
                         f'r="3" fill="#b03a2e"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")

"""Dependency-free visualization: SVG line plots and binary PPM heatmaps.

SVG files are written as plain well-formed XML (polyline per series,
axes, ticks, legend). Heatmaps map a scalar field through a fixed
blue->white->red ramp and are bilinearly upsampled to the requested
resolution before being written as P6 PPM.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .encoder import _bilinear_np
from .errors import DataError

SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                 "#8c564b", "#17becf", "#7f7f7f")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s for s in (1 * mag, 2 * mag, 5 * mag, 10 * mag) if s >= raw)
    first = np.ceil(lo / step) * step
    return [float(t) for t in np.arange(first, hi + step * 0.5, step)]


def _fmt(v):
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.4g}"


def line_plot_svg(path, series, title="", xlabel="", ylabel="",
                  width=640, height=420):
    """Write a multi-series line plot.

    ``series`` maps a legend label to either a list of y values (x = index)
    or a list of (x, y) pairs.
    """
    if not series:
        raise DataError("nothing to plot: no series given")
    pts = {}
    for name, values in series.items():
        values = list(values)
        if not values:
            raise DataError(f"series {name!r} is empty")
        if np.isscalar(values[0]):
            pts[name] = [(float(i), float(v)) for i, v in enumerate(values)]
        else:
            pts[name] = [(float(x), float(y)) for x, y in values]

    xs = [x for p in pts.values() for x, _ in p]
    ys = [y for p in pts.values() for _, y in p]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = (y_hi - y_lo) * 0.08 or max(abs(y_lo), 1.0) * 0.08
    y_lo -= pad
    y_hi += pad

    ml, mr, mt, mb = 64, 16, 36, 44
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        'stroke="#333" stroke-width="1"/>',
    ]
    if title:
        out.append(
            f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{escape(title)}</text>'
        )
    for t in _ticks(x_lo, x_hi):
        if x_lo <= t <= x_hi:
            x = sx(t)
            out.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" '
                       f'y2="{mt + ph + 4}" stroke="#333"/>')
            out.append(f'<text x="{x:.1f}" y="{mt + ph + 18}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        if y_lo <= t <= y_hi:
            y = sy(t)
            out.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" '
                       f'y2="{y:.1f}" stroke="#333"/>')
            out.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end" '
                       f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>')
            out.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" '
                       'stroke="#ddd" stroke-width="0.5"/>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" '
                   'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="12">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {mt + ph / 2:.1f})" '
                   f'font-family="sans-serif" font-size="12">{escape(ylabel)}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                   'stroke-width="1.8"/>')
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + pw - 110}" y1="{ly - 4}" x2="{ml + pw - 88}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw - 82}" y="{ly}" font-family="sans-serif" '
                   f'font-size="11">{escape(str(name))}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
    return path


def _colormap(v01):
    """Blue (low) -> white -> red (high) ramp; v01 in [0,1], any shape."""
    v = np.clip(np.asarray(v01, dtype=np.float64), 0.0, 1.0)
    r = np.where(v < 0.5, 2 * v, 1.0)
    g = 1.0 - np.abs(2 * v - 1.0)
    b = np.where(v < 0.5, 1.0, 2.0 - 2 * v)
    rgb = np.stack([r, g, b], axis=0)
    return np.round(rgb * 255).astype(np.uint8)


def heatmap_ppm(path, values, out_size=None):
    """Write a 2D scalar field as a color P6 PPM, optionally upsampled."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DataError(f"heatmap expects a 2D field, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    v01 = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    if out_size is not None and tuple(out_size) != values.shape:
        v01 = _bilinear_np(v01[None].astype(np.float32), tuple(out_size))[0]
    rgb = _colormap(v01)  # (3, H, W) uint8
    h, w = rgb.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.transpose(1, 2, 0).tobytes())
    return path


def image_ppm(path, image):
    """Write a (3, H, W) float image in [0,1] as P6 PPM."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected a (3, H, W) image, got shape {image.shape}")
    rgb = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = rgb.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.transpose(1, 2, 0).tobytes())
    return path

"""
Scatter SVG emitter for two-dimensional worlds.

Draws final samples over the world geometry: one marker per mixture mean,
1-sigma and 2-sigma ellipses per component, observation lines for
linear-inverse guidance and shaded half-planes for label-field guidance.
Coordinates are printed with fixed precision so identical inputs give
identical documents.
"""

from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from .errors import DimensionMismatchError
from .guidance import LABEL_FIELD, LINEAR_INVERSE, GuidanceSpec
from .models import GaussianMixture

logger = logging.getLogger(__name__)

CANVAS = 480.0
PAD = 16.0
REGION_STYLE = "fill:#4c72b0;fill-opacity:0.08;stroke:none"

HEADER = (
    '<?xml version="1.0" encoding="UTF-8"?>\n'
    '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
    'width="{size:.0f}" height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">\n'
    '<rect x="0" y="0" width="{size:.0f}" height="{size:.0f}" style="fill:#ffffff"/>\n'
)
FOOTER = "</svg>\n"


def _fmt(value: float) -> str:
    text = f"{value:.3f}"
    return "0.000" if text == "-0.000" else text


class ScatterCanvas:
    """Maps data coordinates onto a square canvas with y pointing up."""

    def __init__(self, bounds: Tuple[float, float, float, float]):
        x_min, x_max, y_min, y_max = bounds
        span = max(x_max - x_min, y_max - y_min, 1e-9)
        cx, cy = 0.5 * (x_min + x_max), 0.5 * (y_min + y_max)
        self.x_min, self.x_max = cx - 0.5 * span, cx + 0.5 * span
        self.y_min, self.y_max = cy - 0.5 * span, cy + 0.5 * span
        self.scale = (CANVAS - 2.0 * PAD) / span
        self.commands: List[str] = []

    def X(self, x: float) -> float:
        return PAD + (x - self.x_min) * self.scale

    def Y(self, y: float) -> float:
        return PAD + (self.y_max - y) * self.scale

    def circle(self, x: float, y: float, r: float, cls: str, style: str) -> None:
        self.commands.append(
            f'<circle class="{cls}" cx="{_fmt(self.X(x))}" cy="{_fmt(self.Y(y))}" '
            f'r="{_fmt(r)}" style="{style}"/>'
        )

    def ellipse(
        self, x: float, y: float, rx: float, ry: float, angle: float, cls: str, style: str
    ) -> None:
        X, Y = self.X(x), self.Y(y)
        self.commands.append(
            f'<ellipse class="{cls}" cx="{_fmt(X)}" cy="{_fmt(Y)}" rx="{_fmt(rx * self.scale)}" '
            f'ry="{_fmt(ry * self.scale)}" '
            f'transform="rotate({_fmt(-angle)} {_fmt(X)} {_fmt(Y)})" style="{style}"/>'
        )

    def line(self, a: Tuple[float, float], b: Tuple[float, float], cls: str, style: str) -> None:
        self.commands.append(
            f'<line class="{cls}" x1="{_fmt(self.X(a[0]))}" y1="{_fmt(self.Y(a[1]))}" '
            f'x2="{_fmt(self.X(b[0]))}" y2="{_fmt(self.Y(b[1]))}" style="{style}"/>'
        )

    def rect(self, x0: float, x1: float, y0: float, y1: float, cls: str, style: str) -> None:
        left, right = sorted((self.X(x0), self.X(x1)))
        top, bottom = sorted((self.Y(y0), self.Y(y1)))
        self.commands.append(
            f'<rect class="{cls}" x="{_fmt(left)}" y="{_fmt(top)}" width="{_fmt(right - left)}" '
            f'height="{_fmt(bottom - top)}" style="{style}"/>'
        )

    def render(self) -> str:
        return HEADER.format(size=CANVAS) + "".join(c + "\n" for c in self.commands) + FOOTER


def _bounds(samples: np.ndarray, world: GaussianMixture) -> Tuple[float, float, float, float]:
    reach = 2.5 * np.sqrt(np.linalg.eigvalsh(world.covariances).max(axis=1))
    lo = (world.means - reach[:, None]).min(axis=0)
    hi = (world.means + reach[:, None]).max(axis=0)
    finite = samples[np.all(np.isfinite(samples), axis=1)] if samples.size else samples
    if finite.size:
        lo = np.minimum(lo, finite.min(axis=0))
        hi = np.maximum(hi, finite.max(axis=0))
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def _mask_segment(row: np.ndarray, value: float, canvas: ScatterCanvas) -> Optional[Tuple]:
    a0, a1 = float(row[0]), float(row[1])
    if abs(a0) < 1e-12 and abs(a1) < 1e-12:
        return None
    if abs(a1) >= abs(a0):
        xs = (canvas.x_min, canvas.x_max)
        return tuple((x, (value - a0 * x) / a1) for x in xs)
    ys = (canvas.y_min, canvas.y_max)
    return tuple(((value - a1 * y) / a0, y) for y in ys)


def emit_scatter_svg(samples, world: GaussianMixture, overlays: Sequence[GuidanceSpec] = ()) -> str:
    """
    Render samples and world geometry as an SVG document.

    Args:
        samples: (n, 2) sample array; may be empty
        world: Two-dimensional mixture
        overlays: Guidance specs whose geometry is drawn

    Returns:
        SVG text

    Raises:
        DimensionMismatchError: If the world or samples are not 2-D
    """
    if world.dim != 2:
        raise DimensionMismatchError(f"scatter plots need d = 2, world has d = {world.dim}")
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        samples = np.zeros((0, 2))
    samples = np.atleast_2d(samples)
    if samples.shape[1] != 2:
        raise DimensionMismatchError(
            f"scatter plots need d = 2, samples have d = {samples.shape[1]}"
        )

    canvas = ScatterCanvas(_bounds(samples, world))

    for spec in overlays:
        if spec.kind == LABEL_FIELD:
            labels = np.asarray(spec.prompt)
            x_side = (0.0, canvas.x_max) if labels[0] > 0.5 else (canvas.x_min, 0.0)
            y_side = (0.0, canvas.y_max) if labels[1] > 0.5 else (canvas.y_min, 0.0)
            canvas.rect(*x_side, canvas.y_min, canvas.y_max, "label-region", REGION_STYLE)
            canvas.rect(canvas.x_min, canvas.x_max, *y_side, "label-region", REGION_STYLE)

    for i in range(world.K):
        eigvals, eigvecs = np.linalg.eigh(world.covariances[i])
        angle = float(np.degrees(np.arctan2(eigvecs[1, 1], eigvecs[0, 1])))
        mx, my = world.means[i]
        for level in (1.0, 2.0):
            canvas.ellipse(
                mx, my, level * np.sqrt(eigvals[1]), level * np.sqrt(eigvals[0]), angle,
                "ellipse", "fill:none;stroke:#555555;stroke-width:1",
            )

    for x, y in samples:
        if np.isfinite(x) and np.isfinite(y):
            canvas.circle(x, y, 1.5, "sample", "fill:#dd8452;fill-opacity:0.6")

    for spec in overlays:
        if spec.kind == LINEAR_INVERSE:
            matrix = spec.feature.matrix
            for row, value in zip(matrix, np.atleast_1d(spec.prompt)):
                segment = _mask_segment(row, float(value), canvas)
                if segment is not None:
                    canvas.line(*segment, "mask-line", "stroke:#c44e52;stroke-width:1.5")

    for mx, my in world.means:
        canvas.circle(mx, my, 4.0, "mean-marker", "fill:#000000")

    logger.debug(f"Scatter plot with {samples.shape[0]} samples and {len(overlays)} overlay(s)")
    return canvas.render()

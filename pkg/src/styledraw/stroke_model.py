"""Stroke parameterization: cubic Bezier paths, drawings and run configuration.

Coordinates are stored normalized to the unit square and only converted to
pixels at render time, so a drawing is independent of the canvas resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

WIDTH_MIN = 0.1
MIN_CANVAS = 8
INIT_WIDTH = 1.0
INIT_STEP = 0.05

Point = tuple[float, float]
RGB = tuple[float, float, float]


class InvariantError(ValueError):
    """A stroke, drawing or config violates one of its invariants."""


def _finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class StrokePath:
    """One open cubic Bezier spline.

    ``control_points`` holds ``3k + 1`` points for ``k`` chained segments;
    neighbouring segments share their end point.
    """

    control_points: tuple[Point, ...]
    color: RGB
    opacity: float
    width: float

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.control_points)
        if len(pts) < 4 or len(pts) % 3 != 1:
            raise InvariantError(
                f"stroke needs 3k+1 control points (k >= 1), got {len(pts)}"
            )
        color = tuple(float(c) for c in self.color)
        if len(color) != 3:
            raise InvariantError(f"color must be an RGB triple, got {len(color)} values")
        object.__setattr__(self, "control_points", pts)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "width", float(self.width))

    @property
    def num_segments(self) -> int:
        return (len(self.control_points) - 1) // 3

    def validate(self, width_min: float = WIDTH_MIN) -> None:
        coords = [c for p in self.control_points for c in p]
        if not _finite(coords):
            raise InvariantError("non-finite control point")
        if not _finite((*self.color, self.opacity, self.width)):
            raise InvariantError("non-finite color, opacity or width")
        if any(c < 0.0 or c > 1.0 for c in self.color):
            raise InvariantError(f"color {self.color} outside [0, 1]")
        if not 0.0 <= self.opacity <= 1.0:
            raise InvariantError(f"opacity {self.opacity} outside [0, 1]")
        if self.width < width_min:
            raise InvariantError(f"width {self.width} below minimum {width_min}")


@dataclass(frozen=True)
class Drawing:
    """Ordered strokes on a canvas; later strokes composite over earlier ones."""

    strokes: tuple[StrokePath, ...]
    canvas_width: int
    canvas_height: int
    background_color: RGB = (1.0, 1.0, 1.0)

    def __post_init__(self):
        strokes = tuple(self.strokes)
        if not strokes:
            raise InvariantError("a drawing needs at least one stroke")
        if not all(isinstance(s, StrokePath) for s in strokes):
            raise InvariantError("strokes must be StrokePath instances")
        if int(self.canvas_width) < MIN_CANVAS or int(self.canvas_height) < MIN_CANVAS:
            raise InvariantError(
                f"canvas must be at least {MIN_CANVAS}x{MIN_CANVAS}, "
                f"got {self.canvas_width}x{self.canvas_height}"
            )
        bg = tuple(float(c) for c in self.background_color)
        if len(bg) != 3:
            raise InvariantError("background_color must be an RGB triple")
        object.__setattr__(self, "strokes", strokes)
        object.__setattr__(self, "canvas_width", int(self.canvas_width))
        object.__setattr__(self, "canvas_height", int(self.canvas_height))
        object.__setattr__(self, "background_color", bg)

    @property
    def width_max(self) -> float:
        return self.canvas_width / 4.0

    def validate(self, width_min: float = WIDTH_MIN) -> None:
        if not _finite(self.background_color) or any(
            c < 0.0 or c > 1.0 for c in self.background_color
        ):
            raise InvariantError(f"background {self.background_color} outside [0, 1]")
        for i, stroke in enumerate(self.strokes):
            try:
                stroke.validate(width_min)
            except InvariantError as exc:
                raise InvariantError(f"stroke {i}: {exc}") from None


@dataclass(frozen=True)
class OptimizationConfig:
    """Everything a synthesis run depends on besides prompt, style and encoders."""

    num_paths: int = 256
    segments_per_path: int = 1
    iterations: int = 200
    canvas_size: int = 224
    lr_points: float = 0.8
    lr_color: float = 0.02
    lr_width: float = 0.1
    style_weight: float = 1.0
    style_warmup_iters: int = 50
    num_augmentations: int = 4
    perspective_strength: float = 0.5
    crop_scale_range: tuple[float, float] = (0.7, 0.9)
    feature_samples: int = 1024
    style_term_weights: tuple[float, float, float] = (1.0, 1.0, 0.25)
    grad_clip: float = 10.0
    snapshot_every: int = 10
    seed: int = 0
    # Pixel-space style transfer used only by the decoupled baseline.
    stage2_iterations: int = 100
    stage2_lr: float = 0.01
    stage2_content_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "crop_scale_range", tuple(self.crop_scale_range))
        object.__setattr__(self, "style_term_weights", tuple(self.style_term_weights))
        for name in ("num_paths", "segments_per_path", "feature_samples"):
            if getattr(self, name) < 1:
                raise InvariantError(f"{name} must be >= 1")
        for name in (
            "iterations",
            "style_warmup_iters",
            "num_augmentations",
            "snapshot_every",
            "stage2_iterations",
        ):
            if getattr(self, name) < 0:
                raise InvariantError(f"{name} must be >= 0")
        for name in ("lr_points", "lr_color", "lr_width", "stage2_lr", "grad_clip"):
            if not getattr(self, name) > 0:
                raise InvariantError(f"{name} must be positive")
        if self.canvas_size < MIN_CANVAS:
            raise InvariantError(f"canvas_size must be >= {MIN_CANVAS}")
        if not self.style_weight >= 0 or not self.stage2_content_weight >= 0:
            raise InvariantError("loss weights must be nonnegative")
        if any(not w >= 0 for w in self.style_term_weights):
            raise InvariantError("style term weights must be nonnegative")
        if not 0.0 <= self.perspective_strength <= 1.0:
            raise InvariantError("perspective_strength must lie in [0, 1]")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise InvariantError("crop_scale_range must satisfy 0 < low <= high <= 1")

    def with_(self, **changes) -> "OptimizationConfig":
        return replace(self, **changes)


def random_drawing(
    num_paths: int,
    segments: int,
    canvas: tuple[int, int],
    seed: int,
    background_color: RGB = (1.0, 1.0, 1.0),
) -> Drawing:
    """Random short strokes, each a clamped random walk of control points.

    The first point is uniform on the unit square and every following point
    moves by a uniform offset in ``[-0.05, 0.05]`` per axis.
    """
    if num_paths < 1 or segments < 1:
        raise InvariantError("num_paths and segments must both be >= 1")
    width, height = canvas
    rng = np.random.default_rng(seed)
    strokes = []
    for _ in range(num_paths):
        p = rng.uniform(0.0, 1.0, size=2)
        points = [p]
        for _ in range(3 * segments):
            p = np.clip(p + rng.uniform(-INIT_STEP, INIT_STEP, size=2), 0.0, 1.0)
            points.append(p)
        rgba = rng.uniform(0.0, 1.0, size=4)
        strokes.append(
            StrokePath(
                control_points=tuple((float(x), float(y)) for x, y in points),
                color=tuple(float(c) for c in rgba[:3]),
                opacity=float(rgba[3]),
                width=INIT_WIDTH,
            )
        )
    return Drawing(tuple(strokes), width, height, background_color)


def _clip(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


def clamp_parameters(
    d: Drawing, width_min: float = WIDTH_MIN, width_max: float | None = None
) -> Drawing:
    """Clip color, opacity and width into range. Coordinates are left alone."""
    if width_max is None:
        width_max = d.width_max
    strokes = tuple(
        StrokePath(
            control_points=s.control_points,
            color=tuple(_clip(c, 0.0, 1.0) for c in s.color),
            opacity=_clip(s.opacity, 0.0, 1.0),
            width=_clip(s.width, width_min, width_max),
        )
        for s in d.strokes
    )
    return replace(d, strokes=strokes)

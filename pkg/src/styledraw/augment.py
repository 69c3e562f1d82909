"""Random perspective + resized-crop views of a render.

Both warps are folded into one sampling grid and applied with a single
bilinear ``grid_sample``, so every view is differentiable with respect to
the source pixels. Samples that fall outside the source repeat the border,
which keeps a constant image constant under any warp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .raster import RasterImage

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class AugmentationConfig:
    num_views: int = 4
    perspective_strength: float = 0.5
    crop_scale_range: tuple[float, float] = (0.7, 0.9)
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop_scale_range", tuple(self.crop_scale_range))
        if self.num_views < 0:
            raise ValueError(f"num_views must be >= 0, got {self.num_views}")
        if not 0.0 <= self.perspective_strength <= 1.0:
            raise ValueError("perspective_strength must lie in [0, 1]")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale_range must satisfy 0 < low <= high <= 1")


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending the four ``src`` points onto ``dst``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = np.linalg.solve(np.asarray(rows, float), np.asarray(rhs, float))
    return np.append(h, 1.0).reshape(3, 3)


def _view_grid(rng: np.random.Generator, cfg: AugmentationConfig, size: int) -> np.ndarray:
    # Perspective: the unit square of the warped view samples a quad whose
    # corners are pulled inward by up to strength / 2 of the side per axis.
    unit = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], float)
    jitter = rng.uniform(0.0, 0.5 * cfg.perspective_strength, size=(4, 2))
    H = _homography(unit, unit + inward * jitter)

    # Resized crop in the warped view's unit square.
    lo, hi = cfg.crop_scale_range
    area = rng.uniform(lo, hi)
    log_ratio = rng.uniform(math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1]))
    ratio = math.exp(log_ratio)
    cw = min(math.sqrt(area * ratio), 1.0)
    ch = min(math.sqrt(area / ratio), 1.0)
    x0 = rng.uniform(0.0, 1.0 - cw)
    y0 = rng.uniform(0.0, 1.0 - ch)

    t = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(x0 + t * cw, y0 + t * ch, indexing="xy")
    pts = np.stack([gx, gy, np.ones_like(gx)], axis=-1) @ H.T
    src = pts[..., :2] / pts[..., 2:3]
    return 2.0 * src - 1.0  # grid_sample coordinates, align_corners=False


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-2:] == (size, size):
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def augment_tensor(
    pixels: torch.Tensor, cfg: AugmentationConfig, seed: int, size: int
) -> torch.Tensor:
    """Views of an ``(H, W, 3)`` image as an ``(N, 3, size, size)`` batch."""
    x = pixels.permute(2, 0, 1)[None]
    n = cfg.num_views
    if n == 0:
        return x.new_zeros((0, 3, size, size))
    if not cfg.enabled:
        return _resize(x, size).expand(n, -1, -1, -1).clone()
    rng = np.random.default_rng(seed)
    grid = np.stack([_view_grid(rng, cfg, size) for _ in range(n)])
    grid_t = torch.as_tensor(grid, dtype=pixels.dtype)
    return F.grid_sample(
        x.expand(n, -1, -1, -1),
        grid_t,
        mode="bilinear",
        padding_mode="border",
        align_corners=False,
    )


def augment_batch(
    img: RasterImage, cfg: AugmentationConfig, seed: int, size: int | None = None
) -> list[RasterImage]:
    """``cfg.num_views`` augmented views of ``img`` at ``size`` x ``size``.

    With augmentation disabled the views are plain copies, resampled only
    when ``img`` is not already at ``size``.
    """
    if size is None:
        size = img.height
    batch = augment_tensor(img.pixels, cfg, seed, size)
    return [RasterImage(v.permute(1, 2, 0)) for v in batch]

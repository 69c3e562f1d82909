"""Text-alignment content loss, feature style loss and their combination.

The style loss follows the STROTSS recipe: a relaxed earth mover's distance
between sampled hypercolumns (cosine ground cost), a mean/covariance
matching term, and a relaxed EMD over sampled RGB values (Euclidean ground
cost).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentationConfig, augment_tensor
from .encoders import (
    FeatureExtractor,
    FeatureStack,
    ImageTextEncoder,
    normalize,
    sample_hypercolumns,
    to_batch,
)
from .raster import RasterImage

DEFAULT_TERM_WEIGHTS = (1.0, 1.0, 0.25)
UNIT_TOL = 1e-5


@dataclass(frozen=True)
class LossReport:
    iteration: int
    content_loss: float
    style_loss: float
    total_loss: float
    style_weight_effective: float


def _rows(x: FeatureStack | torch.Tensor) -> torch.Tensor:
    rows = x.samples if isinstance(x, FeatureStack) else torch.as_tensor(x)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("expected a non-empty (N, D) set of vectors")
    return rows


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - a.b`` for unit vectors; broadcasts over leading dimensions."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    dtype = torch.promote_types(a.dtype, b.dtype)
    a, b = a.to(dtype), b.to(dtype)
    for name, v in (("a", a), ("b", b)):
        norms = v.detach().norm(dim=-1)
        if ((norms - 1.0).abs() > UNIT_TOL).any():
            raise ValueError(f"{name} is not unit-norm (norm {norms.flatten()[0]:.6g})")
    return (1.0 - (a * b).sum(-1)).clamp(0.0, 2.0)


def content_loss(
    render: RasterImage,
    text_emb: torch.Tensor,
    aug_cfg: AugmentationConfig,
    encoder: ImageTextEncoder,
    seed: int,
) -> torch.Tensor:
    """Mean cosine distance between augmented views and the prompt embedding.

    With ``num_views == 0`` the render itself, resampled to the encoder's
    resolution, is the only view.
    """
    size = encoder.input_size
    if aug_cfg.num_views == 0:
        views = augment_tensor(
            render.pixels, AugmentationConfig(num_views=1, enabled=False), seed, size
        )
    else:
        views = augment_tensor(render.pixels, aug_cfg, seed, size)
    emb = encoder.embed_images(views)
    return cosine_distance(emb, text_emb).mean()


def _cost_matrix(a: torch.Tensor, b: torch.Tensor, metric: str) -> torch.Tensor:
    if metric == "cosine":
        cost = 1.0 - normalize(a) @ normalize(b).T
        # Costs of (nearly) identical vectors are pure round-off. Zero them,
        # gradient included, so an optimizer cannot amplify the noise.
        floor = 16 * torch.finfo(cost.dtype).eps
        return torch.where(cost > floor, cost, torch.zeros_like(cost))
    if metric == "euclidean":
        # Explicit differences: exact zero for equal vectors, unlike the
        # expanded |a|^2 + |b|^2 - 2ab form. Meant for low-dimensional rows.
        sq = (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)
        return sq.clamp_min(1e-30).sqrt()
    raise ValueError(f"unknown ground metric {metric!r}")


def relaxed_emd(
    A: FeatureStack | torch.Tensor, B: FeatureStack | torch.Tensor, metric: str = "cosine"
) -> torch.Tensor:
    """Max of the two one-sided mean nearest-neighbour costs."""
    a, b = _rows(A), _rows(B)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dtype = torch.promote_types(a.dtype, b.dtype)
    cost = _cost_matrix(a.to(dtype), b.to(dtype), metric)
    return torch.maximum(cost.min(dim=1).values.mean(), cost.min(dim=0).values.mean())


def _canonical_rows(x: torch.Tensor) -> torch.Tensor:
    # Fixed row order makes the reductions below bit-identical under any
    # permutation of the input rows.
    keys = x.detach().cpu().numpy().T[::-1]
    order = np.lexsort(keys)
    return x[torch.as_tensor(order)]


def moment_matching_loss(A: FeatureStack | torch.Tensor, B: FeatureStack | torch.Tensor) -> torch.Tensor:
    """``|mu_A - mu_B|_1 / d + |Sigma_A - Sigma_B|_1 / d^2``.

    The covariance term is dropped when either set has a single row.
    """
    a, b = _rows(A), _rows(B)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dtype = torch.promote_types(a.dtype, b.dtype)
    a, b = _canonical_rows(a.to(dtype)), _canonical_rows(b.to(dtype))
    d = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    loss = (mu_a - mu_b).abs().sum() / d
    if a.shape[0] >= 2 and b.shape[0] >= 2:
        ca, cb = a - mu_a, b - mu_b
        cov_a = ca.T @ ca / (a.shape[0] - 1)
        cov_b = cb.T @ cb / (b.shape[0] - 1)
        loss = loss + (cov_a - cov_b).abs().sum() / d**2
    return loss


def sample_coords(
    n: int, seed: int, shared: bool = False, dtype=torch.float64
) -> tuple[torch.Tensor, torch.Tensor]:
    """Uniform normalized ``(x, y)`` sample positions for render and style."""
    if n < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    first = torch.as_tensor(rng.uniform(0.0, 1.0, size=(n, 2)), dtype=dtype)
    second = first if shared else torch.as_tensor(rng.uniform(0.0, 1.0, size=(n, 2)), dtype=dtype)
    return first, second


def _sample_rgb(img: RasterImage | torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    return sample_hypercolumns([to_batch(img)], coords, (3,)).samples


def palette_loss(
    render: RasterImage,
    style: RasterImage,
    n_samples: int,
    seed: int,
    shared_coords: bool = False,
) -> torch.Tensor:
    """Relaxed EMD with Euclidean cost between sampled RGB values."""
    cr, cs = sample_coords(n_samples, seed, shared_coords)
    return relaxed_emd(_sample_rgb(render, cr), _sample_rgb(style, cs), metric="euclidean")


def _resized(pixels: torch.Tensor, size: int) -> torch.Tensor:
    if pixels.shape[:2] == (size, size):
        return pixels
    x = F.interpolate(to_batch(pixels), size=(size, size), mode="bilinear", align_corners=False)
    return x[0].permute(1, 2, 0)


class StyleTarget:
    """A style image resampled for an extractor, with cached feature maps."""

    def __init__(self, style: RasterImage, extractor: FeatureExtractor,
                 layers: Sequence[int] | None = None):
        self.extractor = extractor
        self.layers = tuple(extractor.default_layers if layers is None else layers)
        self.pixels = _resized(style.pixels.detach(), extractor.input_size)
        with torch.no_grad():
            self.maps = extractor.feature_maps(to_batch(self.pixels), self.layers)
        self.layer_dims = tuple(extractor.layer_dim(l) for l in self.layers)

    def features(self, coords: torch.Tensor) -> FeatureStack:
        return sample_hypercolumns(self.maps, coords, self.layer_dims)


def style_loss(
    render: RasterImage,
    style: RasterImage | StyleTarget,
    extractor: FeatureExtractor,
    n_samples: int,
    seed: int,
    weights: Sequence[float] = DEFAULT_TERM_WEIGHTS,
    layers: Sequence[int] | None = None,
    shared_coords: bool = False,
) -> torch.Tensor:
    """Weighted REMD + moment matching + palette between render and style.

    Both images are resampled to the extractor's input resolution. Terms
    with zero weight are skipped.
    """
    target = style if isinstance(style, StyleTarget) else StyleTarget(style, extractor, layers)
    w_remd, w_moment, w_palette = weights
    pixels = _resized(render.pixels, extractor.input_size)
    cr, cs = sample_coords(n_samples, seed, shared_coords)
    total = pixels.new_zeros(())
    if w_remd or w_moment:
        maps = extractor.feature_maps(to_batch(pixels), target.layers)
        A = sample_hypercolumns(maps, cr, target.layer_dims)
        B = target.features(cs)
        if w_remd:
            total = total + w_remd * relaxed_emd(A, B)
        if w_moment:
            total = total + w_moment * moment_matching_loss(A, B)
    if w_palette:
        total = total + w_palette * relaxed_emd(
            _sample_rgb(pixels, cr), _sample_rgb(target.pixels, cs), metric="euclidean"
        )
    return total


def self_similarity_loss(A: FeatureStack | torch.Tensor, B: FeatureStack | torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of column-normalized pairwise cosine-distance matrices.

    ``A`` and ``B`` must be sampled at the same positions.
    """
    a, b = _rows(A), _rows(B)
    if a.shape != b.shape:
        raise ValueError("self-similarity needs matching sample sets")
    da = _cost_matrix(a, a, "cosine")
    db = _cost_matrix(b, b, "cosine")
    da = da / da.sum(0, keepdim=True).clamp_min(1e-12)
    db = db / db.sum(0, keepdim=True).clamp_min(1e-12)
    return (da - db).abs().mean()


def total_loss(content, style, style_weight):
    if style_weight < 0:
        raise ValueError("style weight must be nonnegative")
    return content + style_weight * style


def warmup_weight(style_weight: float, iteration: int, warmup_iters: int) -> float:
    """Linear ramp from 0 to ``style_weight`` over ``warmup_iters`` iterations."""
    if warmup_iters <= 0:
        return float(style_weight)
    return float(style_weight) * min(1.0, iteration / warmup_iters)

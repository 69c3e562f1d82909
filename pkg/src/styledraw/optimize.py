"""Synthesis loops: coupled text + style, content only, and decoupled baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .augment import AugmentationConfig
from .encoders import Encoders, sample_hypercolumns, to_batch
from .objective import (
    LossReport,
    StyleTarget,
    _resized,
    sample_coords,
    content_loss,
    self_similarity_loss,
    style_loss,
    total_loss,
    warmup_weight,
)
from .raster import RasterImage, StrokeTensors, render, render_tensors
from .stroke_model import WIDTH_MIN, Drawing, OptimizationConfig, random_drawing

log = logging.getLogger(__name__)

Callback = Callable[[int, LossReport], None]
STAGE2_STREAM = 1 << 20


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class RunResult:
    final_drawing: Drawing
    loss_history: list[LossReport]
    snapshots: list[tuple[int, RasterImage]]
    config_echo: OptimizationConfig
    optimizer_state: dict | None = None
    stage2_losses: list[float] = field(default_factory=list)


def iteration_seeds(seed: int, iteration: int) -> tuple[int, int]:
    """Seeds for the augmentation and style sampling of one iteration.

    Counter-based, so a run resumed at ``iteration`` draws exactly what an
    uninterrupted run would.
    """
    a, b = np.random.SeedSequence([seed, iteration]).generate_state(2)
    return int(a), int(b)


def augmentation_config(cfg: OptimizationConfig) -> AugmentationConfig:
    return AugmentationConfig(
        num_views=cfg.num_augmentations,
        perspective_strength=cfg.perspective_strength,
        crop_scale_range=cfg.crop_scale_range,
    )


class _Params:
    """Trainable tensors of a drawing plus their optimizer."""

    def __init__(self, d: Drawing, cfg: OptimizationConfig, optimizer_state: dict | None):
        self.template = d
        t = StrokeTensors.from_drawing(d, dtype=torch.float32)
        if isinstance(t.points, list):
            raise ValueError("optimization needs strokes with equal segment counts")
        self.t = t
        for p in t.tensors():
            p.requires_grad_(True)
        self.width_max = d.width_max
        self.groups = [[t.points], [t.colors, t.opacities], [t.widths]]
        self.opt = torch.optim.Adam(
            [
                # points live in [0, 1]; lr_points is a step size in pixels
                {"params": self.groups[0], "lr": cfg.lr_points / max(d.canvas_width, d.canvas_height)},
                {"params": self.groups[1], "lr": cfg.lr_color},
                {"params": self.groups[2], "lr": cfg.lr_width},
            ]
        )
        if optimizer_state is not None:
            self.opt.load_state_dict(optimizer_state)
        self.grad_clip = cfg.grad_clip

    def render(self) -> torch.Tensor:
        d = self.template
        return render_tensors(
            self.t.points, self.t.colors, self.t.opacities, self.t.widths,
            d.canvas_height, d.canvas_width, d.background_color,
        )

    def step(self, loss: torch.Tensor) -> None:
        self.opt.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
        for p in self.t.tensors():
            # strokes entirely off canvas get no gradient
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        for group in self.groups:
            torch.nn.utils.clip_grad_norm_(group, self.grad_clip)
        self.opt.step()
        with torch.no_grad():
            self.t.colors.clamp_(0.0, 1.0)
            self.t.opacities.clamp_(0.0, 1.0)
            self.t.widths.clamp_(WIDTH_MIN, self.width_max)
        for p in self.t.tensors():
            if not torch.isfinite(p).all():
                raise NonFiniteError("non-finite value in drawing parameters")

    def drawing(self) -> Drawing:
        return self.t.to_drawing(self.template)


def _run(
    prompt: str,
    style: RasterImage | None,
    cfg: OptimizationConfig,
    encoders: Encoders,
    init: Drawing | None = None,
    start_iteration: int = 0,
    optimizer_state: dict | None = None,
    callback: Callback | None = None,
) -> RunResult:
    if init is None:
        init = random_drawing(
            cfg.num_paths, cfg.segments_per_path, (cfg.canvas_size, cfg.canvas_size), cfg.seed
        )
    params = _Params(init, cfg, optimizer_state)
    text_emb = encoders.text_image.embed_text(prompt)
    aug = augmentation_config(cfg)
    target = StyleTarget(style, encoders.features) if style is not None else None

    history, snapshots = [], []
    for it in range(start_iteration, cfg.iterations):
        aug_seed, style_seed = iteration_seeds(cfg.seed, it)
        img = RasterImage(params.render())
        content = content_loss(img, text_emb, aug, encoders.text_image, aug_seed)
        lam = warmup_weight(cfg.style_weight, it, cfg.style_warmup_iters) if target else 0.0
        if target is None:
            style_value = content.new_zeros(())
        else:
            with torch.set_grad_enabled(lam > 0):
                style_value = style_loss(
                    img, target, encoders.features, cfg.feature_samples, style_seed,
                    cfg.style_term_weights,
                )
        total = total_loss(content, style_value, lam) if lam > 0 else content
        report = LossReport(
            it, float(content.detach()), float(style_value.detach()), float(total.detach()), lam
        )
        if not all(math.isfinite(v) for v in (report.content_loss, report.style_loss, report.total_loss)):
            raise NonFiniteError(f"non-finite loss at iteration {it}: {report}")
        history.append(report)
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            snapshots.append((it, img.detach()))
        if callback is not None:
            callback(it, report)
        params.step(total)

    # With no step taken the drawing is returned as given, not round-tripped
    # through float32 tensors.
    final = params.drawing() if history else init
    return RunResult(
        final_drawing=final,
        loss_history=history,
        snapshots=snapshots,
        config_echo=cfg,
        optimizer_state=params.opt.state_dict(),
    )


def synthesize(
    prompt: str,
    style: RasterImage,
    cfg: OptimizationConfig,
    encoders: Encoders,
    callback: Callback | None = None,
) -> RunResult:
    """Optimize a random drawing against the prompt and the style image jointly."""
    return _run(prompt, style, cfg, encoders, callback=callback)


def synthesize_content_only(
    prompt: str, cfg: OptimizationConfig, encoders: Encoders, callback: Callback | None = None
) -> RunResult:
    return _run(prompt, None, cfg.with_(style_weight=0.0), encoders, callback=callback)


def resume(
    prompt: str,
    style: RasterImage | None,
    cfg: OptimizationConfig,
    encoders: Encoders,
    drawing: Drawing,
    iteration: int,
    optimizer_state: dict | None,
    callback: Callback | None = None,
) -> RunResult:
    """Continue a run from a checkpointed drawing and optimizer state."""
    if style is None:
        cfg = cfg.with_(style_weight=0.0)
    return _run(prompt, style, cfg, encoders, drawing, iteration, optimizer_state, callback)


def decoupled_baseline(
    prompt: str,
    style: RasterImage,
    cfg: OptimizationConfig,
    encoders: Encoders,
    callback: Callback | None = None,
) -> tuple[RasterImage, RunResult]:
    """Content-only drawing, then pixel-space style transfer of its render.

    Stage 2 minimizes the style loss plus ``stage2_content_weight`` times a
    self-similarity term that ties the current features to those of the
    stage-1 render at the same positions. The result is a raster without
    stroke structure.
    """
    stage1 = synthesize_content_only(prompt, cfg, encoders, callback)
    base = render(stage1.final_drawing).pixels.detach()
    if cfg.stage2_iterations == 0:
        return RasterImage(base.clone()), stage1

    extractor = encoders.features
    target = StyleTarget(style, extractor)
    with torch.no_grad():
        base_maps = extractor.feature_maps(
            to_batch(_resized(base, extractor.input_size)), target.layers
        )
    pixels = base.clone().requires_grad_(True)
    opt = torch.optim.Adam([pixels], lr=cfg.stage2_lr)
    for k in range(cfg.stage2_iterations):
        _, seed = iteration_seeds(cfg.seed, STAGE2_STREAM + k)
        img = RasterImage(pixels)
        s = style_loss(
            img, target, extractor, cfg.feature_samples, seed, cfg.style_term_weights,
            shared_coords=True,
        )
        loss = s
        if cfg.stage2_content_weight:
            coords, _ = sample_coords(cfg.feature_samples, seed, shared=True)
            now_maps = extractor.feature_maps(
                to_batch(_resized(pixels, extractor.input_size)), target.layers
            )
            loss = loss + cfg.stage2_content_weight * self_similarity_loss(
                sample_hypercolumns(now_maps, coords, target.layer_dims),
                sample_hypercolumns(base_maps, coords, target.layer_dims),
            )
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite stage-2 loss at step {k}")
        stage1.stage2_losses.append(float(s.detach()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            pixels.clamp_(0.0, 1.0)
    return RasterImage(pixels.detach().clone()), stage1

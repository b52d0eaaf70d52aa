"""Splatting optimizer: round-robin views, replay-cache backprop, canonical Adam.

The Gaussian count never changes during training (no densification or
pruning); optimizer moments live in canonical order and are never permuted,
so a depth reorder between iterations cannot disturb the trajectory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import compute_loss
from .rasterizer import (
    ReplayCache,
    chain_to_model,
    project,
    rasterize_backward,
    rasterize_forward,
    scatter_gradients,
    sort_by_depth,
)
from .scene import Frame, GaussianModel, PoseSE3

logger = logging.getLogger(__name__)


def default_learning_rates() -> dict:
    return {
        "positions": 1.6e-4,
        "log_scales": 5e-3,
        "rotations": 1e-3,
        "opacity_logits": 5e-2,
        "color_logits": 2.5e-3,
    }


@dataclass
class TrainConfig:
    iterations: int = 500
    learning_rates: dict = field(default_factory=default_learning_rates)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lambda_ssim: float = 0.2
    t_min: float = 1e-4  # transmittance early stop
    tile_size: int = 16
    k_max: int = 32  # replay-cache capacity per pixel

    def __post_init__(self):
        if any(lr <= 0 for lr in self.learning_rates.values()):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must be in [0, 1]")


@dataclass
class TrainStats:
    losses: list = field(default_factory=list)
    saturated_pixels: list = field(default_factory=list)
    skipped_nonfinite: int = 0

    @property
    def iterations(self) -> int:
        return len(self.losses)


def zero_gradients(model: GaussianModel) -> dict:
    return {k: np.zeros_like(getattr(model, k)) for k in GaussianModel.PARAM_NAMES}


def adam_step(model: GaussianModel, grads: dict, cfg: TrainConfig, t: int, stats: TrainStats = None) -> None:
    """One canonical-order Adam update (bias-corrected), t starting at 1.

    Non-finite gradient elements skip their parameter's update entirely
    (value and moments untouched) and are tallied. Quaternions are
    renormalized after the step.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    for name in GaussianModel.PARAM_NAMES:
        g = grads[name]
        theta = getattr(model, name)
        m, v = model.adam_m[name], model.adam_v[name]
        finite = np.isfinite(g)
        if not finite.all():
            if stats is not None:
                stats.skipped_nonfinite += int((~finite).sum())
            g = np.where(finite, g, 0.0)
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        np.copyto(m, m_new, where=finite)
        np.copyto(v, v_new, where=finite)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        step = cfg.learning_rates[name] * m_hat / (np.sqrt(v_hat) + cfg.eps)
        np.copyto(theta, theta - step, where=finite)
    norms = np.linalg.norm(model.rotations, axis=1, keepdims=True)
    model.rotations /= np.maximum(norms, 1e-12)


def train_step(
    model: GaussianModel,
    frame: Frame,
    pose: PoseSE3,
    cache: ReplayCache,
    cfg: TrainConfig,
    t: int,
    stats: TrainStats,
) -> float:
    """Project, sort, composite, backprop, scatter, and step once on one view."""
    splats = project(model, pose, frame.intrinsics)
    perm = sort_by_depth(splats)
    cache.reset_counters()
    rendered = rasterize_forward(splats, perm, cache, t_min=cfg.t_min, tile=cfg.tile_size)
    loss, dL_dC = compute_loss(rendered, frame.image, cfg.lambda_ssim)
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite loss at iteration {t}")
    g_screen = rasterize_backward(dL_dC, cache, splats, perm)
    g_sorted = chain_to_model(g_screen, splats, perm, model, pose, frame.intrinsics)
    grads = zero_gradients(model)
    scatter_gradients(g_sorted, perm, grads)
    adam_step(model, grads, cfg, t, stats)
    stats.losses.append(loss)
    stats.saturated_pixels.append(cache.saturated_pixels)
    return loss


def train(
    model: GaussianModel,
    frames: list[Frame],
    poses: list[PoseSE3],
    cfg: TrainConfig = None,
) -> TrainStats:
    """Optimize the model in place for ``cfg.iterations`` round-robin steps.

    All frames must share one resolution (one replay cache is reused; only
    its counters are reset between iterations).
    """
    cfg = cfg or TrainConfig()
    if len(frames) != len(poses):
        raise ValueError("need one pose per training frame")
    if cfg.iterations > 0 and not frames:
        raise ValueError("no training views")
    stats = TrainStats()
    if cfg.iterations == 0:
        return stats
    w, h = frames[0].intrinsics.width, frames[0].intrinsics.height
    cache = ReplayCache(w, h, cfg.k_max)
    for it in range(cfg.iterations):
        idx = it % len(frames)
        loss = train_step(model, frames[idx], poses[idx], cache, cfg, it + 1, stats)
        if (it + 1) % 100 == 0 or it == 0:
            logger.info("iter %d/%d view %d loss %.6f", it + 1, cfg.iterations, idx, loss)
    return stats

"""Self-supervision losses: pseudo-label cross-entropy plus cross-scale consistency.

``total = ce + mean_b(inter_b + intra_b)``, where the consistency terms are
computed per batch item.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnops import functional as F
from .nnops.tensor import Tensor
from .sae import ScaleFeatures

PROB_CLAMP = 1e-7
COS_EPS = 1e-8


@dataclass
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    intra_grid: int = 16
    # The 0.5 threshold is a step function, so no gradient can reach the
    # target either way; the flag is kept for configuration parity.
    stop_gradient_target: bool = True

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.intra_grid < 1:
            raise ValueError("intra_grid must be positive")


@dataclass
class LossReport:
    ce: float
    inter: float
    intra: float
    total: float
    inter_per_item: np.ndarray
    intra_per_item: np.ndarray
    total_tensor: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {"ce": self.ce, "inter": self.inter, "intra": self.intra, "total": self.total}


def context_vectors(refined: ScaleFeatures) -> tuple[Tensor, Tensor, Tensor]:
    """Global average pool of each scale: three [B, D] tensors (fine, small, large)."""
    return tuple(F.mean(m, axis=(2, 3)) for m in refined)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine of [B, D] tensors.

    The denominator is ``sqrt(|a|^2 |b|^2 + eps^2)``, which equals ``|a||b|``
    unless a vector is (near) zero, where it stays finite and differentiable.
    """
    dot = F.sum(a * b, axis=-1)
    na2 = F.sum(a * a, axis=-1)
    nb2 = F.sum(b * b, axis=-1)
    return dot / F.sqrt(na2 * nb2 + COS_EPS**2)


def inter_scale_loss(g: tuple[Tensor, Tensor, Tensor], lambda1: float) -> Tensor:
    """Per-item ``lambda1 * [(1 - cos(fine, small)) + (1 - cos(small, large))]``."""
    gf, gs, gl = g
    return lambda1 * ((1.0 - cosine_similarity(gf, gs)) + (1.0 - cosine_similarity(gs, gl)))


def self_similarity(x: Tensor, grid: int) -> Tensor:
    """Row-softmax Gram matrix of grid-pooled tokens: [B,D,H,W] -> [B, L, L], L = grid**2."""
    b, d, h, w = x.shape
    if h < grid or w < grid:
        raise ValueError(
            f"feature map {h}x{w} is smaller than the self-similarity grid {grid}; lower intra_grid"
        )
    pooled = F.adaptive_avg_pool2d(x, (grid, grid))
    tokens = pooled.reshape(b, d, grid * grid).transpose(0, 2, 1)  # [B, L, D]
    logits = F.matmul(tokens, tokens.transpose(0, 2, 1)) * (1.0 / np.sqrt(d))
    return F.softmax(logits, axis=-1)


def intra_scale_loss(a: Tensor, lambda2: float) -> Tensor:
    """Per-item ``lambda2 * mean |A - I|`` for a [B, L, L] (or [L, L]) matrix."""
    n = a.shape[-1]
    eye = np.eye(n, dtype=a.dtype)
    dev = F.abs(a - eye)
    return lambda2 * F.mean(dev, axis=(-2, -1))


def pseudo_targets(probs: np.ndarray) -> np.ndarray:
    return (probs >= 0.5).astype(probs.dtype)


def pseudo_ce_loss(probs: Tensor) -> tuple[Tensor, np.ndarray]:
    """Binary cross-entropy against the model's own thresholded output.

    Returns the scalar loss and the binary target map.
    """
    target = pseudo_targets(probs.data)
    p = F.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    # Probability the model assigns to its own chosen label.
    p_label = p * target + (1.0 - p) * (1.0 - target)
    return -F.mean(F.log(p_label)), target


def total_loss(ce: Tensor, inter_items: Tensor, intra_items: Tensor) -> Tensor:
    return ce + F.mean(inter_items + intra_items)


def compute_losses(probs: Tensor, refined: ScaleFeatures, cfg: LossConfig) -> LossReport:
    ce, _ = pseudo_ce_loss(probs)
    inter = inter_scale_loss(context_vectors(refined), cfg.lambda1)
    intra_scales = [intra_scale_loss(self_similarity(m, cfg.intra_grid), cfg.lambda2) for m in refined]
    intra = (intra_scales[0] + intra_scales[1] + intra_scales[2]) * (1.0 / 3.0)
    total = total_loss(ce, inter, intra)
    return LossReport(
        ce=float(ce.data),
        inter=float(inter.data.mean()),
        intra=float(intra.data.mean()),
        total=float(total.data),
        inter_per_item=inter.data.copy(),
        intra_per_item=intra.data.copy(),
        total_tensor=total,
    )

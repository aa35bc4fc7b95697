"""Attention-Guided Fusion of the three refined scales.

Channel order of the concatenation is [large_proj; small; fine], and attention
channel i gates the i-th slab. Gates are independent sigmoids, so the three
weights at a pixel need not sum to one.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .nnops import functional as F
from .nnops.module import Conv2d, Module
from .nnops.tensor import Tensor
from .sae import ScaleFeatures


class FusionState(NamedTuple):
    large_proj: np.ndarray  # [B,D,H,W]
    concat: np.ndarray  # [B,3D,H,W]
    attn: np.ndarray  # [B,3,H,W]
    fused: np.ndarray  # [B,D,H,W]


def _check_shapes(refined: ScaleFeatures, upsample_large: bool) -> None:
    f, s, l = refined.fine.shape, refined.small.shape, refined.large.shape
    if f != s:
        raise ValueError(f"fine {f} and small {s} feature maps must share a shape")
    want = (f[0], f[1], f[2] // 2, f[3] // 2) if upsample_large else f
    if l != want:
        raise ValueError(f"large feature map {l} must have shape {want} to fuse with fine/small {f}")


class AttentionGuidedFusion(Module):
    def __init__(self, dim: int, *, rng, dtype=np.float32):
        super().__init__()
        self.proj = Conv2d(dim, dim, 1, rng=rng, dtype=dtype)
        self.gate = Conv2d(3 * dim, 3, 1, rng=rng, dtype=dtype)
        # Zero-init so training starts from an even 0.5 / 0.5 / 0.5 weighting.
        self.gate.weight.data[...] = 0
        self.gate.bias.data[...] = 0

    def forward(self, refined: ScaleFeatures, upsample_large: bool = True) -> tuple[Tensor, FusionState]:
        _check_shapes(refined, upsample_large)
        large = F.bilinear_upsample(refined.large, 2) if upsample_large else refined.large
        large_proj = self.proj(large)
        cat = F.concat([large_proj, refined.small, refined.fine], axis=1)
        attn = F.sigmoid(self.gate(cat))
        # The split slabs of ``cat`` are exactly these three tensors.
        fused = (
            large_proj * attn[:, 0:1]
            + refined.small * attn[:, 1:2]
            + refined.fine * attn[:, 2:3]
        )
        state = FusionState(large_proj.data, cat.data, attn.data, fused.data)
        return fused, state


class SumFusion(Module):
    """Unweighted fusion used when the attention-guided module is switched off."""

    def __init__(self, dim: int, *, rng, dtype=np.float32):
        super().__init__()
        self.proj = Conv2d(dim, dim, 1, rng=rng, dtype=dtype)

    def forward(self, refined: ScaleFeatures, upsample_large: bool = True) -> tuple[Tensor, None]:
        _check_shapes(refined, upsample_large)
        large = F.bilinear_upsample(refined.large, 2) if upsample_large else refined.large
        return self.proj(large) + refined.small + refined.fine, None


def fuse(refined: ScaleFeatures, agf: AttentionGuidedFusion, upsample_large: bool = True):
    return agf(refined, upsample_large=upsample_large)


def split_concat(concat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split [B,3D,H,W] back into (large, small, fine) slabs."""
    d = concat.shape[1] // 3
    return concat[:, :d], concat[:, d : 2 * d], concat[:, 2 * d :]


def fusion_weight_summary(state: FusionState) -> tuple[float, float, float]:
    """Batch+spatial mean of each gate channel, ordered (large, small, fine)."""
    m = state.attn.mean(axis=(0, 2, 3))
    return float(m[0]), float(m[1]), float(m[2])

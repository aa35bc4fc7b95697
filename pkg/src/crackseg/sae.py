"""Scale Adaptive Embedder: image batch -> fine / small / large feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nnops import functional as F
from .nnops.module import BatchNorm2d, Conv2d, Module
from .nnops.tensor import Tensor

ACTIVATIONS = {"gelu": F.gelu, "relu": F.relu}


@dataclass
class SaeConfig:
    embed_dim: int = 64
    in_channels: int = 3
    activation: str = "gelu"

    def validate(self, heads: int = 1) -> None:
        if self.embed_dim < 8:
            raise ValueError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if self.embed_dim % heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by the head count {heads}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")


class ScaleFeatures(NamedTuple):
    """Per-scale maps: fine and small at [B,D,H,W], large at [B,D,H/2,W/2]."""

    fine: Tensor
    small: Tensor
    large: Tensor


class TokenSequence(NamedTuple):
    tokens: Tensor  # [B, H*W, D]
    grid: tuple[int, int]


class TokenFeatures(NamedTuple):
    fine: TokenSequence
    small: TokenSequence
    large: TokenSequence


def flatten_tokens(x: Tensor) -> TokenSequence:
    """[B,D,H,W] -> [B,H*W,D], row-major over space (token index = y*W + x)."""
    b, d, h, w = x.shape
    return TokenSequence(x.reshape(b, d, h * w).transpose(0, 2, 1), (h, w))


def unflatten_tokens(seq: TokenSequence) -> Tensor:
    b, n, d = seq.tokens.shape
    h, w = seq.grid
    if n != h * w:
        raise ValueError(f"token count {n} does not match grid {seq.grid}")
    return seq.tokens.transpose(0, 2, 1).reshape(b, d, h, w)


def to_tokens(f: ScaleFeatures) -> TokenFeatures:
    return TokenFeatures(*(flatten_tokens(m) for m in f))


def to_spatial(t: TokenFeatures) -> ScaleFeatures:
    return ScaleFeatures(*(unflatten_tokens(s) for s in t))


class ConvActNorm(Module):
    """conv -> activation -> batch norm, in the order the embedder defines it."""

    def __init__(self, in_ch, out_ch, kernel, stride, padding, activation, *, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, padding, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(out_ch, dtype=dtype)
        self.act = ACTIVATIONS[activation]

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.act(self.conv(x)))


class ScaleAdaptiveEmbedder(Module):
    """Three parallel projections: 1x1 (fine), 3x3 (small), 3x3 stride 2 (large)."""

    def __init__(self, cfg: SaeConfig, *, rng: np.random.Generator, dtype=np.float32, branches=("fine", "small", "large")):
        super().__init__()
        self.cfg = cfg
        self.branches = tuple(branches)
        d, c, act = cfg.embed_dim, cfg.in_channels, cfg.activation
        specs = {"fine": (1, 1, 0), "small": (3, 1, 1), "large": (3, 2, 1)}
        for name in self.branches:
            k, s, p = specs[name]
            self.add_module(name, ConvActNorm(c, d, k, s, p, act, rng=rng, dtype=dtype))

    def check_input(self, image: Tensor) -> None:
        if image.ndim != 4:
            raise ValueError(f"expected an image batch [B,C,H,W], got shape {image.shape}")
        _, c, h, w = image.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"image has {c} channels but the embedder expects {self.cfg.in_channels}")
        if h % 2 or w % 2:
            raise ValueError(f"image height and width must be even, got {h}x{w}; resize to even dimensions first")

    def forward(self, image: Tensor) -> ScaleFeatures:
        self.check_input(image)
        return ScaleFeatures(self.fine(image), self.small(image), self.large(image))

    def embed_single(self, image: Tensor, branch: str = "small") -> Tensor:
        self.check_input(image)
        return getattr(self, branch)(image)


def embed(image: Tensor, embedder: ScaleAdaptiveEmbedder) -> ScaleFeatures:
    return embedder(image)

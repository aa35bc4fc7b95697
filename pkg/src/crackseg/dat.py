"""Directional Attention Transformer blocks.

Queries and keys come from direction-shaped convolutions (1x3 horizontal and
3x1 vertical by default), values from a point-wise convolution. Attention is
element-wise: ``A_k = softmax(Q_k * K_k / sqrt(d_head))``, normalised over the
channels of each head (or over spatial positions in the ablation mode).
Blocks operate on [B,D,H,W] maps; layer norm runs over the channel axis, which
is exactly token-wise layer norm of the flattened sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .nnops import functional as F
from .nnops.module import Conv2d, DepthwiseConv2d, LayerNorm, Module
from .nnops.tensor import Tensor
from .sae import ScaleFeatures, TokenSequence, flatten_tokens, unflatten_tokens

SCALES = ("fine", "small", "large")

# Incremented on every block forward; tests use it to prove variant gating.
BLOCK_CALLS = {"count": 0}


@dataclass
class DatConfig:
    directions: list[tuple[int, int]] = field(default_factory=lambda: [(1, 3), (3, 1)])
    num_blocks: int = 2
    heads: int = 4
    share_weights_across_scales: bool = False
    softmax_axis: str = "channel"  # or "spatial"
    attention_residual: bool = True
    ffn_ratio: int = 2
    ffn_activation: str = "gelu"

    def validate(self, embed_dim: int) -> None:
        self.directions = [tuple(int(v) for v in d) for d in self.directions]
        if not self.directions:
            raise ValueError("at least one attention direction is required")
        for kh, kw in self.directions:
            if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
                raise ValueError(f"direction kernel {(kh, kw)} must have odd positive sides for same padding")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be positive")
        if self.heads < 1 or embed_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide embed_dim={embed_dim}")
        if self.softmax_axis not in ("channel", "spatial"):
            raise ValueError(f"softmax_axis must be 'channel' or 'spatial', got {self.softmax_axis!r}")
        if self.ffn_activation not in ("gelu", "relu"):
            raise ValueError(f"unknown FFN activation {self.ffn_activation!r}")


class AttentionState(NamedTuple):
    """Detached intermediates of one block forward (numpy arrays)."""

    queries: list[np.ndarray]
    keys: list[np.ndarray]
    values: np.ndarray
    attention: list[np.ndarray]
    context: list[np.ndarray]
    summary: np.ndarray  # [B,1,H,W], not yet rescaled


def head_peak_map(attn: np.ndarray, heads: int) -> np.ndarray:
    """Collapse [B,D,H,W] attention to [B,1,H,W].

    Under channel softmax every head's weights sum to one at each pixel, so the
    channel mean is constant; the per-pixel peak weight of each head is used as
    its spatial map instead, then averaged over heads.
    """
    b, d, h, w = attn.shape
    peaks = attn.reshape(b, heads, d // heads, h, w).max(axis=2)
    return peaks.mean(axis=1, keepdims=True)


class FeedForwardDW(Module):
    """1x1 expand -> depthwise 3x3 -> activation -> 1x1 project."""

    def __init__(self, dim, ratio, activation, *, rng, dtype):
        super().__init__()
        hidden = dim * ratio
        self.expand = Conv2d(dim, hidden, 1, rng=rng, dtype=dtype)
        self.dw = DepthwiseConv2d(hidden, 3, 1, rng=rng, dtype=dtype)
        self.project = Conv2d(hidden, dim, 1, rng=rng, dtype=dtype)
        self.act = F.gelu if activation == "gelu" else F.relu

    def forward(self, x: Tensor) -> Tensor:
        return self.project(self.act(self.dw(self.expand(x))))


class DatBlock(Module):
    def __init__(self, dim: int, cfg: DatConfig, *, rng, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.cfg = cfg
        self.norm1 = LayerNorm(dim, axis=1, dtype=dtype)
        self.queries: list[Conv2d] = []
        self.keys: list[Conv2d] = []
        for i, (kh, kw) in enumerate(cfg.directions):
            pad = (kh // 2, kw // 2)
            q = Conv2d(dim, dim, (kh, kw), 1, pad, rng=rng, dtype=dtype)
            k = Conv2d(dim, dim, (kh, kw), 1, pad, rng=rng, dtype=dtype)
            self.add_module(f"q{i}", q)
            self.add_module(f"k{i}", k)
            self.queries.append(q)
            self.keys.append(k)
        self.value = Conv2d(dim, dim, 1, rng=rng, dtype=dtype)
        self.out_proj = Conv2d(dim * len(cfg.directions), dim, 1, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, axis=1, dtype=dtype)
        self.ffn = FeedForwardDW(dim, cfg.ffn_ratio, cfg.ffn_activation, rng=rng, dtype=dtype)

    def _attend(self, logits: Tensor) -> Tensor:
        b, d, h, w = logits.shape
        heads = self.cfg.heads
        if self.cfg.softmax_axis == "channel":
            a = F.softmax(logits.reshape(b, heads, d // heads, h, w), axis=2)
        else:
            a = F.softmax(logits.reshape(b, d, h * w), axis=-1)
        return a.reshape(b, d, h, w)

    def forward(self, x: Tensor, record: bool = False) -> tuple[Tensor, AttentionState | None]:
        BLOCK_CALLS["count"] += 1
        _, d, h, w = x.shape
        for kh, kw in self.cfg.directions:
            if kh > h or kw > w:
                raise ValueError(f"direction kernel {(kh, kw)} is larger than the {h}x{w} feature map")
        scale = 1.0 / np.sqrt(d // self.cfg.heads)
        xn = self.norm1(x)
        v = self.value(xn)
        contexts, rec_q, rec_k, rec_a, rec_c = [], [], [], [], []
        for qconv, kconv in zip(self.queries, self.keys):
            q = qconv(xn)
            k = kconv(xn)
            a = self._attend(q * k * scale)
            c = a * v
            contexts.append(c)
            if record:
                rec_q.append(q.data.copy())
                rec_k.append(k.data.copy())
                rec_a.append(a.data.copy())
                rec_c.append(c.data.copy())
        cat = contexts[0] if len(contexts) == 1 else F.concat(contexts, axis=1)
        attn = self.out_proj(cat)
        if self.cfg.attention_residual:
            attn = attn + x
        out = self.ffn(self.norm2(attn)) + attn
        state = None
        if record:
            summary = np.mean([head_peak_map(a, self.cfg.heads) for a in rec_a], axis=0)
            state = AttentionState(rec_q, rec_k, v.data.copy(), rec_a, rec_c, summary)
        return out, state


class DatStack(Module):
    """``num_blocks`` blocks applied in sequence to one scale."""

    def __init__(self, dim: int, cfg: DatConfig, *, rng, dtype=np.float32):
        super().__init__()
        self.blocks: list[DatBlock] = []
        for i in range(cfg.num_blocks):
            blk = DatBlock(dim, cfg, rng=rng, dtype=dtype)
            self.add_module(f"block{i}", blk)
            self.blocks.append(blk)

    def forward(self, x: Tensor, record: bool = False) -> tuple[Tensor, AttentionState | None]:
        state = None
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            x, st = blk(x, record=record and i == last)
            if st is not None:
                state = st
        return x, state


class DirectionalAttentionTransformer(Module):
    """Per-scale DAT stacks (independent weights unless sharing is enabled)."""

    def __init__(self, dim: int, cfg: DatConfig, *, rng, dtype=np.float32, scales=SCALES):
        super().__init__()
        self.cfg = cfg
        self.scales = tuple(scales)
        if cfg.share_weights_across_scales:
            self.add_module("shared", DatStack(dim, cfg, rng=rng, dtype=dtype))
        else:
            for s in self.scales:
                self.add_module(s, DatStack(dim, cfg, rng=rng, dtype=dtype))

    def stack_for(self, scale: str) -> DatStack:
        return self.shared if self.cfg.share_weights_across_scales else getattr(self, scale)

    def refine_one(self, scale: str, x: Tensor, record: bool = False):
        return self.stack_for(scale)(x, record=record)

    def forward(self, f: ScaleFeatures, record: bool = False) -> tuple[ScaleFeatures, dict[str, AttentionState]]:
        outs, states = {}, {}
        for s in SCALES:
            outs[s], st = self.refine_one(s, getattr(f, s), record=record)
            if st is not None:
                states[s] = st
        return ScaleFeatures(**outs), states


def refine(f: ScaleFeatures, dat: DirectionalAttentionTransformer, record: bool = False):
    return dat(f, record=record)


def dat_block(seq: TokenSequence, block: DatBlock, record: bool = False) -> tuple[TokenSequence, AttentionState | None]:
    """Token-sequence entry point: [B, H*W, D] tokens in, same layout out."""
    out, state = block(unflatten_tokens(seq), record=record)
    return flatten_tokens(out), state


def attention_summary(state: AttentionState | np.ndarray | None) -> np.ndarray:
    """Per-image min-max rescale of the head/direction-averaged map to [0, 1].

    A constant map has no contrast to show and is returned as all zeros.
    """
    if state is None:
        raise RuntimeError("no attention recorded; run a forward pass with recording enabled first")
    raw = state.summary if isinstance(state, AttentionState) else np.asarray(state)
    raw = raw.astype(np.float64)
    flat = raw.reshape(raw.shape[0], -1)
    lo = flat.min(axis=1)
    span = flat.max(axis=1) - lo
    out = np.zeros_like(flat)
    nz = span > 0
    out[nz] = (flat[nz] - lo[nz, None]) / span[nz, None]
    return out.reshape(raw.shape)

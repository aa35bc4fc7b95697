"""Full Crack-Segmenter assembly and the v0-v3 ablation wirings.

Variant wiring (modules switched off are not instantiated at all, so they
cost nothing and own no parameters):

========  ===========================================================
full      embedder(3 scales) -> DAT per scale -> attention-guided fusion
v0        embedder(3 scales) -> sum fusion
v1        embedder(3 scales) -> DAT per scale -> sum fusion
v2        embedder(3 scales) -> attention-guided fusion
v3        embedder(small branch only) -> DAT -> attention-guided fusion
          fed the single refined map in all three slots (no upsampling)
========  ===========================================================

Sum fusion is ``proj(upsample(large)) + small + fine``. Every variant ends in
the same decoder: a 1x1 convolution to one channel followed by a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .agf import AttentionGuidedFusion, FusionState, SumFusion
from .dat import AttentionState, DatConfig, DirectionalAttentionTransformer
from .nnops import functional as F
from .nnops.module import Conv2d, Module
from .nnops.tensor import Tensor, no_grad
from .sae import SaeConfig, ScaleAdaptiveEmbedder, ScaleFeatures

VARIANTS = ("full", "v0", "v1", "v2", "v3", "baseline-off")
VARIANT_MODULES = {
    "full": {"sae": True, "dat": True, "agf": True},
    "v0": {"sae": True, "dat": False, "agf": False},
    "v1": {"sae": True, "dat": True, "agf": False},
    "v2": {"sae": True, "dat": False, "agf": True},
    "v3": {"sae": False, "dat": True, "agf": True},
}
MIN_SIDE = 16


@dataclass
class ModelConfig:
    sae: SaeConfig = field(default_factory=SaeConfig)
    dat: DatConfig = field(default_factory=DatConfig)
    variant: str = "full"
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "baseline-off":
            raise ValueError(
                "variant 'baseline-off' names the supervised U-Net baseline, which is not part of this package"
            )
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.sae.validate(self.dat.heads)
        self.dat.validate(self.sae.embed_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dat"]["directions"] = [list(x) for x in self.dat.directions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        dat = dict(d.get("dat", {}))
        if "directions" in dat:
            dat["directions"] = [tuple(x) for x in dat["directions"]]
        return cls(sae=SaeConfig(**d.get("sae", {})), dat=DatConfig(**dat), variant=d.get("variant", "full"), seed=d.get("seed", 0))


class PredictionBatch(NamedTuple):
    probs: np.ndarray  # [B,H,W] in [0,1]
    mask: np.ndarray  # [B,H,W] uint8, 1 where probs >= 0.5
    pseudo_target: np.ndarray  # [B,H,W] uint8, same rule


class ModelOutput(NamedTuple):
    probs: Tensor  # [B,H,W], differentiable
    prediction: PredictionBatch
    refined: ScaleFeatures
    fusion: FusionState | None
    attention: dict[str, AttentionState]


def make_prediction(probs: np.ndarray) -> PredictionBatch:
    mask = (probs >= 0.5).astype(np.uint8)
    return PredictionBatch(probs, mask, mask.copy())


class CrackSegmenter(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        gates = VARIANT_MODULES[cfg.variant]
        rng = np.random.default_rng(cfg.seed)
        d = cfg.sae.embed_dim
        multiscale = gates["sae"]
        branches = ("fine", "small", "large") if multiscale else ("small",)
        self.sae = ScaleAdaptiveEmbedder(cfg.sae, rng=rng, dtype=dtype, branches=branches)
        if gates["dat"]:
            scales = ("fine", "small", "large") if multiscale else ("small",)
            self.dat = DirectionalAttentionTransformer(d, cfg.dat, rng=rng, dtype=dtype, scales=scales)
        else:
            self.dat = None
        if gates["agf"]:
            self.fusion = AttentionGuidedFusion(d, rng=rng, dtype=dtype)
        else:
            self.fusion = SumFusion(d, rng=rng, dtype=dtype)
        self.decoder = Conv2d(d, 1, 1, rng=rng, dtype=dtype)
        self.multiscale = multiscale

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def check_input(self, image: Tensor) -> None:
        self.sae.check_input(image)
        h, w = image.shape[-2:]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"image sides must be at least {MIN_SIDE}, got {h}x{w}")

    def forward(self, image, record_attention: bool = False) -> ModelOutput:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        self.check_input(image)
        attention: dict[str, AttentionState] = {}
        if self.multiscale:
            feats = self.sae(image)
            if self.dat is not None:
                feats, attention = self.dat(feats, record=record_attention)
            upsample = True
        else:
            x = self.sae.embed_single(image, "small")
            x, state = self.dat.refine_one("small", x, record=record_attention)
            if state is not None:
                attention = {s: state for s in ("fine", "small", "large")}
            feats = ScaleFeatures(x, x, x)
            upsample = False
        fused, fusion_state = self.fusion(feats, upsample_large=upsample)
        logits = self.decoder(fused)
        b, _, h, w = logits.shape
        probs = F.sigmoid(logits).reshape(b, h, w)
        return ModelOutput(probs, make_prediction(probs.data), feats, fusion_state, attention)

    def predict(self, images: np.ndarray, record_attention: bool = False) -> ModelOutput:
        """Inference in eval mode without recording a graph."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return self.forward(images, record_attention=record_attention)
        finally:
            self.train(was_training)


def build_model(cfg: ModelConfig, dtype=np.float32) -> CrackSegmenter:
    return CrackSegmenter(cfg, dtype=dtype)

"""Deterministic synthetic crack images with exact ground-truth masks.

Each image is a textured grey background (smooth illumination drift plus
truncated Gaussian grain) crossed by 1-3 dark curvilinear strokes. Strokes are
cubic Bezier curves running border to border with random wiggle; they are
rasterised without anti-aliasing, and the mask is exactly the set of pixels
darkened by the stroke.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .nnops.functional import bilinear_matrix


@dataclass
class SynthSpec:
    count: int = 64
    size: tuple[int, int] = (256, 256)
    min_strokes: int = 1
    max_strokes: int = 3
    min_width: int = 1
    max_width: int = 4
    background: float = 0.62
    illumination: float = 0.06  # amplitude of the smooth brightness drift
    noise_sigma: float = 0.035  # grain; truncated at 3 sigma
    contrast_gap: float = 0.32
    seed: int = 0

    def validate(self) -> None:
        h, w = self.size
        if h % 2 or w % 2 or h < 16 or w < 16:
            raise ValueError(f"image size must be even and at least 16, got {self.size}")
        if not 0 <= self.min_strokes <= self.max_strokes:
            raise ValueError("stroke count range is invalid")
        if not 1 <= self.min_width <= self.max_width:
            raise ValueError("stroke width range is invalid")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        # Guarantees stroke pixels sit at least gap/2 below the local background.
        lo = self.background - self.illumination - 3 * self.noise_sigma
        if lo - self.contrast_gap < 0 or self.background + self.illumination + 3 * self.noise_sigma > 1:
            raise ValueError("background/contrast settings would clip outside [0, 1]")
        if 6 * self.noise_sigma > self.contrast_gap:
            raise ValueError("noise_sigma too large for the contrast gap (need 6*sigma <= gap)")


def _border_point(rng, h, w, side):
    if side == 0:
        return np.array([0.0, rng.uniform(0, w - 1)])
    if side == 1:
        return np.array([h - 1.0, rng.uniform(0, w - 1)])
    if side == 2:
        return np.array([rng.uniform(0, h - 1), 0.0])
    return np.array([rng.uniform(0, h - 1), w - 1.0])


def _stroke_points(rng, h, w) -> np.ndarray:
    """Dense samples (<= 0.25 px apart) along a border-to-border cubic Bezier."""
    side = int(rng.integers(4))
    opposite = {0: 1, 1: 0, 2: 3, 3: 2}[side]
    p0 = _border_point(rng, h, w, side)
    p3 = _border_point(rng, h, w, opposite)
    span = np.array([h, w], dtype=float)
    p1 = p0 + (p3 - p0) / 3 + rng.normal(0, 0.2, 2) * span
    p2 = p0 + 2 * (p3 - p0) / 3 + rng.normal(0, 0.2, 2) * span
    # Control points inside the frame keep the whole curve inside it.
    p1 = np.clip(p1, 0, span - 1)
    p2 = np.clip(p2, 0, span - 1)
    approx_len = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1) + np.linalg.norm(p3 - p2)
    n = int(approx_len * 4) + 2
    t = np.linspace(0, 1, n)[:, None]
    pts = ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t**2 * p2 + t**3 * p3
    # Small-scale meander so strokes are not perfectly smooth.
    wiggle = np.cumsum(rng.normal(0, 0.15, (n, 2)), axis=0)
    wiggle -= np.linspace(0, 1, n)[:, None] * wiggle[-1]
    return pts + wiggle


def _disk_offsets(width: int) -> np.ndarray:
    r = width / 2.0
    k = int(np.ceil(r))
    yy, xx = np.mgrid[-k : k + 1, -k : k + 1]
    keep = (yy + 0.5 * (width % 2 == 0)) ** 2 + (xx + 0.5 * (width % 2 == 0)) ** 2 <= r * r
    return np.stack([yy[keep], xx[keep]], axis=1)


def rasterize_stroke(points: np.ndarray, width: int, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    centers = np.round(points).astype(int)
    # Bridge diagonal steps so the centre line is 4-connected.
    step = np.diff(centers, axis=0)
    diag = (step[:, 0] != 0) & (step[:, 1] != 0)
    bridges = centers[:-1][diag] + np.stack([step[diag, 0], np.zeros(diag.sum(), int)], axis=1)
    centers = np.unique(np.concatenate([centers, bridges]), axis=0)
    offs = _disk_offsets(width)
    cells = (centers[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    ok = (cells[:, 0] >= 0) & (cells[:, 0] < h) & (cells[:, 1] >= 0) & (cells[:, 1] < w)
    mask = np.zeros(shape, dtype=bool)
    mask[cells[ok, 0], cells[ok, 1]] = True
    return mask


def _smooth_field(rng, h, w) -> np.ndarray:
    """Low-frequency brightness drift in [-1, 1]."""
    coarse = rng.uniform(-1, 1, (5, 5))
    return bilinear_matrix(5, h) @ coarse @ bilinear_matrix(5, w).T


def generate_one(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (image uint8 [H,W,3], mask uint8 [H,W] in {0,1}) for one index."""
    h, w = spec.size
    rng = np.random.default_rng([spec.seed, index])
    background = spec.background + spec.illumination * _smooth_field(rng, h, w)
    grain = np.clip(rng.normal(0, 1, (h, w)), -3, 3) * spec.noise_sigma
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(spec.min_strokes, spec.max_strokes + 1))):
        width = int(rng.integers(spec.min_width, spec.max_width + 1))
        mask |= rasterize_stroke(_stroke_points(rng, h, w), width, (h, w))
    gray = background + grain - spec.contrast_gap * mask
    tint = np.array([1.0, 0.985, 0.965])  # slight warm cast, same for every image
    rgb = np.clip(gray[..., None] * tint, 0.0, 1.0)
    return np.round(rgb * 255).astype(np.uint8), mask.astype(np.uint8)


def generate_arrays(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    spec.validate()
    pairs = [generate_one(spec, i) for i in range(spec.count)]
    if not pairs:
        h, w = spec.size
        return np.zeros((0, h, w, 3), np.uint8), np.zeros((0, h, w), np.uint8)
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def generate(spec: SynthSpec, out_dir: str | Path) -> list[str]:
    """Write ``images/`` and ``masks/`` PNGs under ``out_dir``; return the stems."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    stems = []
    for i in range(spec.count):
        img, mask = generate_one(spec, i)
        stem = f"synth_{i:04d}"
        Image.fromarray(img).save(out / "images" / f"{stem}.png")
        Image.fromarray(mask * 255).save(out / "masks" / f"{stem}.png")
        stems.append(stem)
    return stems


def line_image(size: int = 32, thickness: int = 2, vertical: bool = True, bright: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """A single straight line on a flat background: (image float [3,H,W] in [-1,1], mask [H,W])."""
    mask = np.zeros((size, size), dtype=np.uint8)
    c = size // 2 - thickness // 2
    if vertical:
        mask[:, c : c + thickness] = 1
    else:
        mask[c : c + thickness, :] = 1
    img = np.where(mask.astype(bool), 1.0 if bright else -1.0, 0.0)
    return np.repeat(img[None], 3, axis=0), mask

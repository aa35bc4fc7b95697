"""Attention heatmap overlays and predicted-mask images.

Overlay rule: ``out = 0.5 * jet(attn) + 0.5 * image`` per pixel and channel,
where ``attn`` is the min-max rescaled summary from the final DAT block of a
scale, bilinearly resized to the input size, and ``image`` is the input in
[0, 1]. ``jet`` is the classic piecewise-linear blue-cyan-yellow-red ramp
(0 maps to dark blue, 1 to dark red).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dat import attention_summary
from .data import DataError, denormalize, load_image, resize_bilinear

logger = logging.getLogger(__name__)

OVERLAY_ALPHA = 0.5
SCALES = ("fine", "small", "large")


def jet(x: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB in [0, 1]; output shape is ``x.shape + (3,)``."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * x - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * x - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * x - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay(image01: np.ndarray, attn: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend a heatmap over an [H,W,3] image in [0,1]; returns float [H,W,3]."""
    h, w = image01.shape[:2]
    attn = np.clip(resize_bilinear(np.asarray(attn, dtype=np.float64), (h, w)), 0.0, 1.0)
    return alpha * jet(attn) + (1.0 - alpha) * image01


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


@dataclass
class ExportRecord:
    name: str
    mask_path: Path
    overlay_paths: dict[str, Path]
    summaries: dict[str, np.ndarray]  # min-max rescaled, native scale resolution


def export_one(model, image: np.ndarray, name: str, out_dir: Path) -> ExportRecord:
    """Write ``<name>_mask.png`` and ``<name>_attn_<scale>.png`` for one [3,H,W] image."""
    if model.dat is None:
        raise ValueError(f"variant {model.variant!r} has no directional attention to export")
    out = model.predict(image[None], record_attention=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = out_dir / f"{name}_mask.png"
    save_mask_png(out.prediction.mask[0], mask_path)
    base = np.clip(denormalize(image.astype(np.float64)), 0.0, 1.0).transpose(1, 2, 0)
    paths, summaries = {}, {}
    for scale in SCALES:
        summ = attention_summary(out.attention[scale])[0, 0]
        summaries[scale] = summ
        paths[scale] = out_dir / f"{name}_attn_{scale}.png"
        Image.fromarray(to_uint8(overlay(base, summ))).save(paths[scale])
    return ExportRecord(name, mask_path, paths, summaries)


def export_attention(model, image_paths, out_dir, target: tuple[int, int] | None = None) -> list[ExportRecord]:
    """Export every readable image; unreadable ones are skipped with a warning."""
    out_dir = Path(out_dir)
    records = []
    for path in image_paths:
        path = Path(path)
        try:
            img = load_image(path, target)
        except DataError as exc:
            logger.warning("skipping %s: %s", path, exc)
            continue
        records.append(export_one(model, img, path.stem, out_dir))
    return records

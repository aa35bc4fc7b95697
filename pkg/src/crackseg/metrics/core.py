"""Per-image segmentation metrics and dataset aggregation.

Empty-mask conventions (flagged on every report that hits them):

* IoU of a class absent from both masks is 1; Dice of two empty crack sets is 1.
* Hausdorff distance is 0 when both crack sets are empty. When exactly one is
  empty it is the image diagonal, i.e. 1 after normalisation.
* The |G|-normalised XOR ratio is undefined (``None``) for an empty ground truth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

METRIC_NAMES = ("miou", "dice", "xor", "xor_ratio", "hd", "hd_raw")


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"masks must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        uniq = np.unique(arr)
        if not np.isin(uniq, (0, 1)).all():
            raise ValueError(f"masks must be binary (0/1), found values {uniq[:6]}")
        arr = arr.astype(bool)
    return arr


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_mask(p), _as_mask(g)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def class_iou(p: np.ndarray, g: np.ndarray) -> float:
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def miou(p, g) -> float:
    """Mean of crack-class and background-class IoU."""
    p, g = _pair(p, g)
    return (class_iou(p, g) + class_iou(~p, ~g)) / 2.0


def dice(p, g) -> float:
    p, g = _pair(p, g)
    denom = np.count_nonzero(p) + np.count_nonzero(g)
    if denom == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & g) / denom


def xor_metric(p, g) -> float:
    """Fraction of pixels on which the two masks disagree."""
    p, g = _pair(p, g)
    return np.count_nonzero(p ^ g) / p.size


def xor_ratio(p, g) -> float | None:
    """Disagreeing pixels divided by the ground-truth crack pixel count."""
    p, g = _pair(p, g)
    n_g = np.count_nonzero(g)
    if n_g == 0:
        return None
    return np.count_nonzero(p ^ g) / n_g


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # Exact Euclidean distance from every pixel to the nearest pixel of b.
    dist = ndimage.distance_transform_edt(~b)
    return float(dist[a].max())


def hausdorff(p, g, normalize: bool = True) -> float:
    """Symmetric Hausdorff distance between the crack-pixel coordinate sets."""
    p, g = _pair(p, g)
    diag = math.hypot(*p.shape)
    np_, ng = p.any(), g.any()
    if not np_ and not ng:
        raw = 0.0
    elif not np_ or not ng:
        raw = diag
    else:
        raw = max(_directed(p, g), _directed(g, p))
    return raw / diag if normalize else raw


@dataclass
class ImageMetrics:
    name: str
    miou: float
    dice: float
    xor: float
    xor_ratio: float | None
    hd: float
    hd_raw: float
    flags: list[str] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return bool(self.flags)

    def as_row(self) -> dict:
        row = asdict(self)
        row["flags"] = ";".join(self.flags)
        return row


def evaluate_pair(p, g, name: str = "") -> ImageMetrics:
    p, g = _pair(p, g)
    flags = []
    if not g.any():
        flags.append("empty_gt")
    if not p.any():
        flags.append("empty_pred")
    return ImageMetrics(
        name=name,
        miou=miou(p, g),
        dice=dice(p, g),
        xor=xor_metric(p, g),
        xor_ratio=xor_ratio(p, g),
        hd=hausdorff(p, g, normalize=True),
        hd_raw=hausdorff(p, g, normalize=False),
        flags=flags,
    )


@dataclass
class MetricSummary:
    mean: float | None
    std: float | None  # sample standard deviation; None below two values
    count: int


@dataclass
class MetricReport:
    images: list[ImageMetrics]
    summary: dict[str, MetricSummary]
    degenerate_counts: dict[str, int]
    excluded_degenerate: bool = False

    def to_json(self) -> dict:
        return {
            "n_images": len(self.images),
            "excluded_degenerate": self.excluded_degenerate,
            "degenerate_counts": self.degenerate_counts,
            "metrics": {k: asdict(v) for k, v in self.summary.items()},
        }


def mean_std(values) -> MetricSummary:
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return MetricSummary(None, None, 0)
    mu = float(vals.mean())
    std = float(np.sqrt(((vals - mu) ** 2).sum() / (vals.size - 1))) if vals.size >= 2 else None
    return MetricSummary(mu, std, int(vals.size))


def aggregate(reports: list[ImageMetrics], exclude_degenerate: bool = False) -> MetricReport:
    if not reports:
        raise ValueError("cannot aggregate an empty list of image reports")
    counts: dict[str, int] = {}
    for r in reports:
        for f in r.flags:
            counts[f] = counts.get(f, 0) + 1
    used = [r for r in reports if not (exclude_degenerate and r.degenerate)]
    summary = {name: mean_std(getattr(r, name) for r in used) for name in METRIC_NAMES}
    return MetricReport(list(reports), summary, counts, exclude_degenerate)

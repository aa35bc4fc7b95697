"""Image ingestion, deterministic train/val split, normalisation and augmentation.

Directory layout: ``<root>/images/*.png|jpg`` and, for evaluation only,
``<root>/masks/<same stem>.png``. The training path never touches masks; every
mask read goes through :func:`read_mask`.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .nnops.functional import bilinear_matrix

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
NORM_MEAN = 0.5
NORM_STD = 0.5


class DataError(RuntimeError):
    """Raised for unusable datasets or image files."""


@dataclass
class DatasetSpec:
    root: str = "data"
    image_dir: str = "images"
    mask_dir: str | None = "masks"
    image_glob: str = "*"
    resize: tuple[int, int] | None = (256, 256)
    split_seed: int = 0
    train_fraction: float = 0.8

    def validate(self) -> None:
        if self.resize is not None:
            h, w = self.resize
            if h % 2 or w % 2 or h < 16 or w < 16:
                raise ValueError(f"resize target must be even and at least 16, got {self.resize}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class AugmentationSpec:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    rotation: str = "right-angle"  # or "free" (reflect-padded arbitrary angle)
    p_scale: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.25)
    enabled: bool = True


# ----------------------------------------------------------------------- split
def list_images(spec: DatasetSpec) -> list[Path]:
    folder = Path(spec.root) / spec.image_dir
    if not folder.is_dir():
        raise DataError(f"image directory not found: {folder}")
    files = sorted(p for p in folder.glob(spec.image_glob) if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found in {folder}")
    return files


def _split_key(name: str, seed: int) -> str:
    return hashlib.sha256(f"{seed}:{name}".encode()).hexdigest()


def split_names(names: list[str], seed: int, train_fraction: float = 0.8) -> tuple[list[str], list[str]]:
    """Rank files by a seeded hash of their name; the first ``round(0.8 n)`` train."""
    if len(names) < 5:
        raise DataError(f"need at least 5 images for a train/val split, got {len(names)}")
    ranked = sorted(names, key=lambda n: (_split_key(n, seed), n))
    n_train = int(round(train_fraction * len(names)))
    train = sorted(ranked[:n_train])
    val = sorted(ranked[n_train:])
    return train, val


def load_split(spec: DatasetSpec) -> tuple[list[Path], list[Path]]:
    files = list_images(spec)
    by_name = {p.name: p for p in files}
    train, val = split_names(list(by_name), spec.split_seed, spec.train_fraction)
    return [by_name[n] for n in train], [by_name[n] for n in val]


# ----------------------------------------------------------------------- images
def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Half-pixel bilinear resize of a [..., H, W] array (no antialiasing)."""
    h, w = img.shape[-2:]
    if (h, w) == tuple(out_hw):
        return img
    mh = bilinear_matrix(h, out_hw[0])
    mw = bilinear_matrix(w, out_hw[1])
    return np.matmul(np.matmul(mh, img), mw.T)


def resize_nearest(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == tuple(out_hw):
        return mask
    ys = np.minimum(((np.arange(out_hw[0]) + 0.5) * h / out_hw[0]).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_hw[1]) + 0.5) * w / out_hw[1]).astype(int), w - 1)
    return mask[np.ix_(ys, xs)]


def _even_target(h: int, w: int, target) -> tuple[int, int]:
    if target is not None:
        return int(target[0]), int(target[1])
    return h - h % 2, w - w % 2


def decode_image(path: str | Path) -> np.ndarray:
    """Read an image as float64 RGB [3,H,W] in [0,1]; grayscale is replicated."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "LA", "I", "I;16", "F", "1"):
                gray = np.asarray(im.convert("F"), dtype=np.float64)
                scale = 65535.0 if im.mode.startswith("I") and gray.max() > 255 else 255.0
                arr = np.repeat((gray / scale)[None], 3, axis=0)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def normalize(img01: np.ndarray) -> np.ndarray:
    return (img01 - NORM_MEAN) / NORM_STD


def denormalize(img: np.ndarray) -> np.ndarray:
    return img * NORM_STD + NORM_MEAN


def load_image(path: str | Path, target: tuple[int, int] | None = (256, 256)) -> np.ndarray:
    """Decode, bilinear-resize to ``target`` and standardise: float32 [3,H,W]."""
    arr = decode_image(path)
    out_hw = _even_target(arr.shape[1], arr.shape[2], target)
    return normalize(resize_bilinear(arr, out_hw)).astype(np.float32)


def read_mask(path: str | Path, target: tuple[int, int] | None = (256, 256)) -> np.ndarray:
    """Binary mask (any nonzero pixel is crack), nearest-resized: uint8 [H,W]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    mask = (arr > 127).astype(np.uint8)
    out_hw = _even_target(mask.shape[0], mask.shape[1], target)
    return resize_nearest(mask, out_hw)


def mask_path_for(image_path: Path, spec: DatasetSpec) -> Path | None:
    if spec.mask_dir is None:
        return None
    folder = Path(spec.root) / spec.mask_dir
    for suffix in (".png", image_path.suffix):
        cand = folder / (image_path.stem + suffix)
        if cand.exists():
            return cand
    return None


@dataclass
class ImageSet:
    """Decoded images held in memory (masks are never part of this)."""

    paths: list[Path]
    images: np.ndarray  # float32 [N,3,H,W]
    skipped: list[tuple[Path, str]] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [p.stem for p in self.paths]

    def __len__(self) -> int:
        return len(self.paths)


def load_images(paths: list[Path], target: tuple[int, int] | None) -> ImageSet:
    """Decode every readable image; unreadable ones are skipped and reported."""
    ok, arrays, skipped = [], [], []
    for p in paths:
        try:
            arrays.append(load_image(p, target))
            ok.append(p)
        except DataError as exc:
            logger.warning("skipping %s: %s", p, exc)
            skipped.append((p, str(exc)))
    if not arrays:
        raise DataError("none of the images could be read")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"images have different sizes {sorted(shapes)}; set a resize target")
    return ImageSet(ok, np.stack(arrays), skipped)


# ------------------------------------------------------------------ augmentation
def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1, :].copy()


def rot90(img: np.ndarray, k: int = 1) -> np.ndarray:
    return np.rot90(img, k, axes=(-2, -1)).copy()


def _scale_jitter(img: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    nh, nw = max(2, int(round(h * factor))), max(2, int(round(w * factor)))
    scaled = resize_bilinear(img, (nh, nw))
    # Crop when larger, reflect-pad when smaller, at a random offset.
    if nh >= h:
        y0 = int(rng.integers(0, nh - h + 1))
        scaled = scaled[:, y0 : y0 + h]
    else:
        top = int(rng.integers(0, h - nh + 1))
        scaled = np.pad(scaled, ((0, 0), (top, h - nh - top), (0, 0)), mode="reflect")
    if nw >= w:
        x0 = int(rng.integers(0, nw - w + 1))
        scaled = scaled[:, :, x0 : x0 + w]
    else:
        left = int(rng.integers(0, w - nw + 1))
        scaled = np.pad(scaled, ((0, 0), (0, 0), (left, w - nw - left)), mode="reflect")
    return scaled


def augment(img: np.ndarray, rng: np.random.Generator, spec: AugmentationSpec | None = None) -> np.ndarray:
    """Random flips, rotation and scale jitter; output shape equals input shape."""
    spec = spec or AugmentationSpec()
    if not spec.enabled:
        return img
    out = img
    if rng.random() < spec.p_hflip:
        out = hflip(out)
    if rng.random() < spec.p_vflip:
        out = vflip(out)
    h, w = out.shape[-2:]
    if spec.rotation == "free":
        angle = float(rng.uniform(0.0, 360.0))
        out = ndimage.rotate(out, angle, axes=(-1, -2), reshape=False, order=1, mode="reflect")
    else:
        k = int(rng.integers(4)) if h == w else 2 * int(rng.integers(2))
        if k:
            out = rot90(out, k)
    if rng.random() < spec.p_scale:
        lo, hi = spec.scale_range
        factor = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        out = _scale_jitter(out, factor, rng)
    return np.ascontiguousarray(out, dtype=img.dtype)


# ---------------------------------------------------------------------- batching
def batch_indices(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[np.ndarray]:
    """Epoch-seeded order split into batches; the last partial batch is kept."""
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(
    images: ImageSet,
    batch_size: int = 8,
    seed: int = 0,
    epoch: int = 0,
    *,
    shuffle: bool = True,
    augmentation: AugmentationSpec | None = None,
) -> Iterator[tuple[list[str], np.ndarray]]:
    """Yield ``(names, batch [B,3,H,W])``; augmentation is keyed by (seed, epoch, image)."""
    for idx in batch_indices(len(images), batch_size, seed, epoch, shuffle):
        arrs = images.images[idx]
        if augmentation is not None and augmentation.enabled:
            arrs = np.stack(
                [augment(images.images[i], np.random.default_rng([seed, epoch, int(i), 7]), augmentation) for i in idx]
            )
        yield [images.paths[i].stem for i in idx], arrs

"""Self-supervised training loop: AdamW, plateau schedule, early stopping, checkpoints.

Both the learning-rate schedule and early stopping monitor the total validation
loss (pseudo-label CE plus the consistency terms). An epoch counts as an
improvement only when ``val_loss < best - 1e-6``. The two counters are kept in
separate objects and never read each other.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentationSpec, DatasetSpec, ImageSet, batches, load_images, load_split, mask_path_for, read_mask
from .losses import LossConfig, compute_losses
from .metrics.core import dice, miou
from .model import CrackSegmenter, ModelConfig, build_model
from .nnops.tensor import Parameter, Tensor, backward

logger = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-6
GRAD_CLIP_DEBUG_NORM = 5.0  # suggested value for --grad-clip when chasing collapse


class NonFiniteError(RuntimeError):
    """Training produced a NaN/inf; ``last_good`` names the retained checkpoint."""

    def __init__(self, message: str, last_good: str | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    max_epochs: int = 500
    early_stop_patience: int = 100
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None  # global-norm clip; off by default
    augment: bool = True
    val_metrics: bool = False  # opt-in: score val predictions against masks (reads mask files)

    def validate(self) -> None:
        for name in ("lr", "plateau_factor", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        for name in ("plateau_patience", "max_epochs", "early_stop_patience", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# ---------------------------------------------------------------------- AdamW
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: list[tuple[str, Parameter]],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update in place.

    Every gradient is checked before any parameter changes, so a non-finite
    gradient aborts the whole step.
    """
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay:
            p.data -= (lr * cfg.weight_decay) * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# --------------------------------------------------------- schedule and stop
@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.5
    patience: int = 5
    tol: float = IMPROVEMENT_TOL
    best: float = math.inf
    counter: int = 0
    reductions: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr *= self.factor
                self.reductions += 1
                self.counter = 0
        return self.lr


@dataclass
class EarlyStopper:
    patience: int = 100
    tol: float = IMPROVEMENT_TOL
    best: float = math.inf
    counter: int = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; return True when training should stop."""
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience


# ------------------------------------------------------------------ fitting
@dataclass
class FitResult:
    history: list[dict]
    step_losses: list[float]
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    stop_reason: str
    model: CrackSegmenter
    seconds: float = 0.0


def _mean_components(acc: dict[str, float], n: int) -> dict[str, float]:
    return {k: v / n for k, v in acc.items()}


def train_epoch(model, images: ImageSet, adam: AdamState, lr: float, cfg: TrainConfig, loss_cfg: LossConfig, epoch: int, step_losses: list[float] | None = None) -> dict:
    model.train()
    params = list(model.named_parameters())
    aug = AugmentationSpec(enabled=cfg.augment)
    acc = {"ce": 0.0, "inter": 0.0, "intra": 0.0, "total": 0.0}
    n, pos, pix = 0, 0, 0
    for _, arr in batches(images, cfg.batch_size, cfg.seed, epoch, augmentation=aug):
        model.zero_grad()
        out = model(Tensor(arr))
        rep = compute_losses(out.probs, out.refined, loss_cfg)
        if not math.isfinite(rep.total):
            raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
        backward(rep.total_tensor)
        if cfg.grad_clip is not None:
            clip_grad_norm([p for _, p in params], cfg.grad_clip)
        adamw_step(params, adam, lr, cfg)
        b = arr.shape[0]
        for k, v in rep.as_dict().items():
            acc[k] += v * b
        n += b
        pos += int(out.prediction.mask.sum())
        pix += out.prediction.mask.size
        if step_losses is not None:
            step_losses.append(rep.total)
    row = _mean_components(acc, n)
    row["pos_pixel_fraction"] = pos / pix
    return row


def validation_loss(model, images: ImageSet, batch_size: int, loss_cfg: LossConfig) -> tuple[dict, np.ndarray]:
    """Loss components on un-augmented images in eval mode; also returns the masks."""
    acc = {"ce": 0.0, "inter": 0.0, "intra": 0.0, "total": 0.0}
    masks = []
    for _, arr in batches(images, batch_size, shuffle=False):
        out = model.predict(arr)
        rep = compute_losses(out.probs, out.refined, loss_cfg)
        for k, v in rep.as_dict().items():
            acc[k] += v * arr.shape[0]
        masks.append(out.prediction.mask)
    return _mean_components(acc, len(images)), np.concatenate(masks)


def validation_metrics(pred_masks: np.ndarray, images: ImageSet, spec: DatasetSpec) -> dict | None:
    """Mask-based scores for reporting only; the sole place fit reads masks."""
    scores = []
    for pred, path in zip(pred_masks, images.paths):
        mpath = mask_path_for(path, spec)
        if mpath is None:
            continue
        gt = read_mask(mpath, pred.shape)
        scores.append((miou(pred, gt), dice(pred, gt)))
    if not scores:
        return None
    arr = np.asarray(scores)
    return {"val_miou": float(arr[:, 0].mean()), "val_dice": float(arr[:, 1].mean())}


def run_config(model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig, data_spec: DatasetSpec) -> dict:
    data = asdict(data_spec)
    return {
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg),
        "loss": asdict(loss_cfg),
        "data": data,
    }


def _save(path: Path, model, adam: AdamState, config: dict, train_state: dict) -> None:
    tensors = ckpt.model_tensors(model)
    for name in adam.m:
        tensors[f"adam_m/{name}"] = adam.m[name]
        tensors[f"adam_v/{name}"] = adam.v[name]
    rng_state = {"scheme": "numpy.default_rng([seed, epoch])", "seed": config["train"]["seed"], "next_epoch": train_state["epoch"]}
    ckpt.save(path, ckpt.CheckpointData(config, tensors, train_state, rng_state))


def _restore_adam(data: ckpt.CheckpointData, step: int) -> AdamState:
    return AdamState(step, {k: v.copy() for k, v in data.group("adam_m").items()}, {k: v.copy() for k, v in data.group("adam_v").items()})


def fit(
    model_cfg: ModelConfig,
    data_spec: DatasetSpec,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    out_dir: str | Path | None = None,
    *,
    resume: bool = False,
    on_epoch: Callable[[dict], None] | None = None,
    split: tuple[list[Path], list[Path]] | None = None,
) -> FitResult:
    """Train until early stop or ``max_epochs``; checkpoints go to ``out_dir``.

    With ``resume=True`` training continues from ``out_dir/last.ckpt``. Data
    order and augmentation are keyed by (seed, epoch), so a resumed run
    reproduces the uninterrupted trace exactly.
    """
    loss_cfg = loss_cfg or LossConfig()
    train_cfg.validate()
    loss_cfg.validate()
    data_spec.validate()
    model_cfg.validate()
    start_time = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_paths, val_paths = split if split is not None else load_split(data_spec)
    train_set = load_images(train_paths, data_spec.resize)
    val_set = load_images(val_paths, data_spec.resize)
    logger.info("training on %d images, validating on %d", len(train_set), len(val_set))

    model = build_model(model_cfg)
    config = run_config(model_cfg, train_cfg, loss_cfg, data_spec)
    adam = AdamState()
    sched = PlateauScheduler(train_cfg.lr, train_cfg.plateau_factor, train_cfg.plateau_patience)
    stopper = EarlyStopper(train_cfg.early_stop_patience)
    history: list[dict] = []
    step_losses: list[float] = []
    start_epoch = 0
    best_path = out / "best.ckpt" if out else None
    last_path = out / "last.ckpt" if out else None
    log_path = out / "train_log.jsonl" if out else None

    if resume:
        if last_path is None or not last_path.exists():
            raise FileNotFoundError("resume requested but no last.ckpt in the output directory")
        data = ckpt.load(last_path)
        ckpt.restore_model(model, data)
        ts = data.train_state
        adam = _restore_adam(data, ts["adam_step"])
        sched = PlateauScheduler(**ts["scheduler"])
        stopper = EarlyStopper(**ts["early_stop"])
        history = list(ts["history"])
        step_losses = list(ts["step_losses"])
        start_epoch = ts["epoch"]
        logger.info("resumed from %s at epoch %d", last_path, start_epoch)
    elif log_path is not None and log_path.exists():
        log_path.unlink()

    stop_reason = "max_epochs"
    have_good = last_path is not None and last_path.exists()
    for epoch in range(start_epoch, train_cfg.max_epochs):
        lr = sched.lr
        try:
            tr = train_epoch(model, train_set, adam, lr, train_cfg, loss_cfg, epoch, step_losses)
            val, val_masks = validation_loss(model, val_set, train_cfg.batch_size, loss_cfg)
            if not math.isfinite(val["total"]):
                raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        except NonFiniteError as exc:
            exc.last_good = str(last_path) if have_good else None
            logger.error("%s; last good checkpoint: %s", exc, exc.last_good)
            raise
        row = {
            "epoch": epoch,
            "lr": lr,
            "variant": model_cfg.variant,
            "train_ce": tr["ce"],
            "train_inter": tr["inter"],
            "train_intra": tr["intra"],
            "train_total": tr["total"],
            "val_ce": val["ce"],
            "val_inter": val["inter"],
            "val_intra": val["intra"],
            "val_total": val["total"],
            "pos_pixel_fraction": tr["pos_pixel_fraction"],
        }
        if train_cfg.val_metrics:
            scores = validation_metrics(val_masks, val_set, data_spec)
            if scores is not None:
                row.update(scores)
        improved = val["total"] < stopper.best - IMPROVEMENT_TOL
        sched.step(val["total"])
        stop = stopper.step(val["total"])
        history.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if out is not None:
            state = {
                "epoch": epoch + 1,
                "adam_step": adam.step,
                "scheduler": asdict(sched),
                "early_stop": asdict(stopper),
                "history": history,
                "step_losses": step_losses,
            }
            if improved:
                _save(best_path, model, adam, config, state)
            _save(last_path, model, adam, config, state)
            have_good = True
        if on_epoch is not None:
            on_epoch(row)
        logger.info(
            "epoch %d lr %.2e train %.5f val %.5f pos %.4f%s",
            epoch, lr, tr["total"], val["total"], tr["pos_pixel_fraction"],
            f" miou {row['val_miou']:.4f}" if "val_miou" in row else "",
        )
        if stop:
            stop_reason = "early_stop"
            break
    return FitResult(
        history,
        step_losses,
        best_path if best_path is not None and best_path.exists() else None,
        last_path,
        stop_reason,
        model,
        time.perf_counter() - start_time,
    )


def load_trained(path: str | Path) -> tuple[CrackSegmenter, ckpt.CheckpointData]:
    """Rebuild the model recorded in a checkpoint and load its weights."""
    data = ckpt.load(path)
    model_cfg = ModelConfig.from_dict(data.config["model"])
    model = build_model(model_cfg)
    ckpt.restore_model(model, data)
    model.eval()
    return model, data

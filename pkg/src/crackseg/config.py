"""Flat run configuration shared by the command-line tools.

One file (JSON or YAML) holds every key below; anything else is rejected.
The key namespace is flat and maps onto the library dataclasses.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dat import DatConfig
from .data import DatasetSpec
from .losses import LossConfig
from .model import ModelConfig
from .sae import SaeConfig
from .trainer import TrainConfig

OUT_DIR_ENV = "CRACKSEG_OUT_DIR"


class ConfigError(ValueError):
    """Invalid or unknown configuration keys/values."""


@dataclass(frozen=True)
class Key:
    name: str
    section: str  # sae | dat | model | train | loss | data | run
    attr: str
    default: object
    help: str


def _k(name, section, attr, default, help_):
    return Key(name, section, attr, default, help_)


KEYS: tuple[Key, ...] = (
    # model
    _k("variant", "model", "variant", "full", "model wiring: full, v0, v1, v2 or v3"),
    _k("seed", "model", "seed", 0, "seeds parameter init, data order and augmentation"),
    _k("embed_dim", "sae", "embed_dim", 64, "feature channels D of every scale"),
    _k("in_channels", "sae", "in_channels", 3, "input image channels"),
    _k("activation", "sae", "activation", "gelu", "embedder activation: gelu or relu"),
    _k("directions", "dat", "directions", [[1, 3], [3, 1]], "query/key kernel shapes, one per direction"),
    _k("num_blocks", "dat", "num_blocks", 2, "attention blocks per scale"),
    _k("heads", "dat", "heads", 4, "attention heads; must divide embed_dim"),
    _k("share_weights_across_scales", "dat", "share_weights_across_scales", False, "one attention stack for all scales"),
    _k("softmax_axis", "dat", "softmax_axis", "channel", "attention normalisation axis: channel or spatial"),
    _k("attention_residual", "dat", "attention_residual", True, "add the block input back after attention"),
    _k("ffn_ratio", "dat", "ffn_ratio", 2, "feed-forward expansion ratio"),
    _k("ffn_activation", "dat", "ffn_activation", "gelu", "feed-forward activation: gelu or relu"),
    # training
    _k("lr", "train", "lr", 1e-4, "initial AdamW learning rate"),
    _k("weight_decay", "train", "weight_decay", 1e-5, "decoupled weight decay"),
    _k("plateau_factor", "train", "plateau_factor", 0.5, "learning-rate multiplier on a plateau"),
    _k("plateau_patience", "train", "plateau_patience", 5, "non-improving epochs before the rate is cut"),
    _k("max_epochs", "train", "max_epochs", 500, "upper bound on training epochs"),
    _k("early_stop_patience", "train", "early_stop_patience", 100, "non-improving epochs before stopping"),
    _k("batch_size", "train", "batch_size", 8, "images per optimisation step"),
    _k("betas", "train", "betas", [0.9, 0.999], "AdamW moment decay rates"),
    _k("eps", "train", "eps", 1e-8, "AdamW denominator epsilon"),
    _k("grad_clip", "train", "grad_clip", None, "global gradient-norm clip (off when null; 5.0 for debugging)"),
    _k("augment", "train", "augment", True, "random flips, right-angle rotations and scale jitter"),
    _k("val_metrics", "train", "val_metrics", False, "report validation mIoU/Dice from mask files (off keeps training mask-free)"),
    # loss
    _k("lambda1", "loss", "lambda1", 0.1, "inter-scale consistency weight"),
    _k("lambda2", "loss", "lambda2", 0.1, "intra-scale consistency weight"),
    _k("intra_grid", "loss", "intra_grid", 16, "token grid side for the self-similarity matrix"),
    _k("stop_gradient_target", "loss", "stop_gradient_target", True, "treat pseudo-labels as constants"),
    # data
    _k("data_root", "data", "root", "data", "dataset directory holding images/ (and masks/)"),
    _k("image_dir", "data", "image_dir", "images", "image subdirectory"),
    _k("mask_dir", "data", "mask_dir", "masks", "mask subdirectory, evaluation only (null disables)"),
    _k("image_glob", "data", "image_glob", "*", "filename pattern inside image_dir"),
    _k("resize", "data", "resize", [256, 256], "resize target [H, W]; both even"),
    _k("split_seed", "data", "split_seed", 0, "seed of the hash-based 80:20 split"),
    _k("train_fraction", "data", "train_fraction", 0.8, "share of images in the training split"),
    # run
    _k("out_dir", "run", "out_dir", "runs/default", f"output directory (env {OUT_DIR_ENV} overrides)"),
)
KEY_INDEX = {k.name: k for k in KEYS}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k.name: _copy(k.default) for k in KEYS})

    def __getitem__(self, name):
        return self.values[name]

    def section(self, section: str) -> dict:
        return {k.attr: self.values[k.name] for k in KEYS if k.section == section}

    def model_config(self) -> ModelConfig:
        dat = self.section("dat")
        dat["directions"] = [tuple(d) for d in dat["directions"]]
        return ModelConfig(sae=SaeConfig(**self.section("sae")), dat=DatConfig(**dat), **self.section("model"))

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        t["betas"] = tuple(t["betas"])
        return TrainConfig(seed=self.values["seed"], **t)

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.section("loss"))

    def data_spec(self) -> DatasetSpec:
        d = self.section("data")
        d["resize"] = None if d["resize"] is None else tuple(d["resize"])
        return DatasetSpec(**d)

    @property
    def out_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV) or self.values["out_dir"])

    def validate(self) -> None:
        try:
            self.model_config().validate()
            self.train_config().validate()
            self.loss_config().validate()
            self.data_spec().validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {k.name: _copy(self.values[k.name]) for k in KEYS}


def _copy(v):
    return json.loads(json.dumps(v))


def apply(cfg: RunConfig, updates: dict, source: str = "config") -> RunConfig:
    unknown = sorted(set(updates) - set(KEY_INDEX))
    if unknown:
        raise ConfigError(f"unknown key(s) in {source}: {', '.join(unknown)}")
    for name, value in updates.items():
        cfg.values[name] = value
    return cfg


def load_file(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping of keys to values")
    return doc


def build(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        apply(cfg, load_file(path), str(path))
    if overrides:
        apply(cfg, {k: v for k, v in overrides.items() if v is not None}, "command line")
    cfg.validate()
    return cfg


def describe() -> str:
    """Every key with its default and meaning, grouped by section."""
    lines, section = [], None
    for k in KEYS:
        if k.section != section:
            section = k.section
            lines.append(f"# [{section}]")
        lines.append(f"{k.name}: {json.dumps(k.default)}  # {k.help}")
    return "\n".join(lines)

import builtins
import json
import math

import numpy as np
import pytest
from PIL import Image

from crackseg import trainer
from crackseg.checkpoint import load
from crackseg.data import DatasetSpec
from crackseg.losses import LossConfig
from crackseg.nnops.tensor import Parameter
from crackseg.trainer import (
    AdamState,
    EarlyStopper,
    NonFiniteError,
    PlateauScheduler,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    fit,
    load_trained,
)


def param(value, grad=None):
    p = Parameter(np.asarray(value, dtype=np.float64))
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return p


def quick_cfg(**kw):
    base = dict(max_epochs=2, batch_size=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def spec(synth_root):
    return DatasetSpec(root=str(synth_root), resize=(32, 32))


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self):
        p = param([1.0, -2.0], [0.0, 0.0])
        adamw_step([("p", p)], AdamState(), 0.1, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = param([0.0, 0.0], [1.0, -1.0])
        adamw_step([("p", p)], AdamState(), 1e-3, cfg)
        np.testing.assert_allclose(p.data, [-1e-3 / (1 + 1e-8), 1e-3 / (1 + 1e-8)], rtol=1e-12)

    def test_decoupled_decay(self):
        cfg = TrainConfig(weight_decay=0.1)
        p = param([2.0], [0.0])
        adamw_step([("p", p)], AdamState(), 0.5, cfg)
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0, abs=1e-15)

    def test_quadratic_bowl(self):
        p = param([3.0, -4.0])
        state, cfg = AdamState(), TrainConfig(weight_decay=0.0)
        start = float(np.sum(p.data**2))
        for _ in range(200):
            p.grad = 2 * p.data
            adamw_step([("p", p)], state, 0.05, cfg)
        assert float(np.sum(p.data**2)) < 0.01 * start
        assert state.step == 200

    def test_nan_aborts_before_any_update(self):
        a = param([1.0], [0.5])
        b = param([1.0], [np.nan])
        with pytest.raises(NonFiniteError, match="'decoder.weight'"):
            adamw_step([("sae.weight", a), ("decoder.weight", b)], AdamState(), 0.1, TrainConfig())
        assert a.data[0] == 1.0

    def test_clip(self):
        p = param([0.0, 0.0], [3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8], atol=1e-9)


def reference_schedule(losses, lr0, patience, factor=0.5, tol=1e-6):
    """Independent re-statement: halve after `patience` consecutive non-improving epochs."""
    lrs, best, bad, lr = [], math.inf, 0, lr0
    for v in losses:
        lrs.append(lr)
        if v < best - tol:
            best, bad = v, 0
        else:
            bad += 1
            if bad == patience:
                lr, bad = lr * factor, 0
    return lrs


class TestPlateau:
    def test_improving_never_cuts(self):
        s = PlateauScheduler(1e-4)
        for i in range(50):
            s.step(1.0 - 0.01 * i)
        assert s.lr == 1e-4 and s.reductions == 0

    def test_flat_halves_at_fifth_epoch(self):
        s = PlateauScheduler(1e-4)
        lrs = []
        for _ in range(10):
            s.step(1.0)
            lrs.append(s.lr)
        # Epoch 0 sets the best; epochs 1-5 are non-improving.
        assert lrs[:5] == [1e-4] * 5
        assert lrs[5:] == [5e-5] * 5
        assert s.reductions == 1

    def test_tiny_gain_is_not_improvement(self):
        s = PlateauScheduler(1.0, patience=2)
        for v in (1.0, 1.0 - 5e-7, 1.0 - 9e-7):
            s.step(v)
        assert s.lr == 0.5

    def test_against_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            losses = np.cumsum(rng.choice([-0.01, 0.0, 0.005], size=60)) + 1.0
            s = PlateauScheduler(1.0)
            got = []
            for v in losses:
                got.append(s.lr)
                s.step(float(v))
            assert got == reference_schedule(losses, 1.0, 5)

    def test_lr_is_power_of_half(self):
        s = PlateauScheduler(1e-4)
        for _ in range(31):
            s.step(1.0)
        assert s.lr == 1e-4 * 0.5**s.reductions
        assert s.reductions == 6


class TestEarlyStop:
    def test_flat_stops_at_100(self):
        e = EarlyStopper()
        stops = [e.step(1.0) for _ in range(101)]
        assert stops.index(True) == 100

    def test_improvement_at_99_resets(self):
        e = EarlyStopper()
        losses = [1.0] * 99 + [0.5] + [0.5] * 100
        stops = [e.step(v) for v in losses]
        assert not any(stops[:199])
        assert stops[199]

    def test_counters_independent(self):
        s, e = PlateauScheduler(1e-4), EarlyStopper()
        for _ in range(60):
            s.step(1.0)
            e.step(1.0)
        assert e.counter == 59
        assert s.counter == 59 % 5


class TestFit:
    def test_smoke(self, spec, tiny_model_cfg, tmp_path):
        res = fit(tiny_model_cfg, spec, quick_cfg(), out_dir=tmp_path)
        assert len(res.history) == 2
        rows = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1]
        assert {"val_total", "train_ce", "pos_pixel_fraction", "lr", "variant"} <= set(rows[0])
        assert res.best_checkpoint.exists() and res.last_checkpoint.exists()
        assert load(res.last_checkpoint).train_state["epoch"] == 2

    def test_deterministic(self, spec, tiny_model_cfg, tmp_path):
        a = fit(tiny_model_cfg, spec, quick_cfg(), out_dir=tmp_path / "a")
        b = fit(tiny_model_cfg, spec, quick_cfg(), out_dir=tmp_path / "b")
        assert a.step_losses == b.step_losses
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()

    def test_resume_reproduces_trace(self, spec, tiny_model_cfg, tmp_path):
        full = fit(tiny_model_cfg, spec, quick_cfg(max_epochs=3), out_dir=tmp_path / "full")
        fit(tiny_model_cfg, spec, quick_cfg(max_epochs=1), out_dir=tmp_path / "part")
        resumed = fit(tiny_model_cfg, spec, quick_cfg(max_epochs=3), out_dir=tmp_path / "part", resume=True)
        assert resumed.step_losses == full.step_losses
        assert [r["val_total"] for r in resumed.history] == [r["val_total"] for r in full.history]
        log = (tmp_path / "part" / "train_log.jsonl").read_text().splitlines()
        assert len(log) == 3

    def test_resume_without_checkpoint(self, spec, tiny_model_cfg, tmp_path):
        with pytest.raises(FileNotFoundError):
            fit(tiny_model_cfg, spec, quick_cfg(), out_dir=tmp_path, resume=True)

    def test_nan_keeps_last_good(self, spec, tiny_model_cfg, tmp_path, monkeypatch):
        real = trainer.compute_losses
        calls = {"n": 0}

        def poisoned(*args, **kw):
            rep = real(*args, **kw)
            calls["n"] += 1
            if calls["n"] > 6:  # two train + one val batch per epoch
                rep.total = float("nan")
            return rep

        monkeypatch.setattr(trainer, "compute_losses", poisoned)
        with pytest.raises(NonFiniteError) as info:
            fit(tiny_model_cfg, spec, quick_cfg(max_epochs=5), out_dir=tmp_path)
        assert info.value.last_good == str(tmp_path / "last.ckpt")
        good = load(tmp_path / "last.ckpt")
        assert good.train_state["epoch"] == 2
        assert all(np.isfinite(v).all() for v in good.tensors.values())

    def test_early_stop_reason(self, spec, tiny_model_cfg):
        res = fit(tiny_model_cfg, spec, quick_cfg(max_epochs=5, early_stop_patience=1, lr=1e-12))
        assert res.stop_reason == "early_stop"
        assert len(res.history) < 5

    def test_load_trained(self, spec, tiny_model_cfg, tmp_path):
        res = fit(tiny_model_cfg, spec, quick_cfg(max_epochs=1), out_dir=tmp_path)
        model, data = load_trained(tmp_path / "last.ckpt")
        assert not model.training
        x = np.zeros((1, 3, 32, 32), np.float32)
        np.testing.assert_array_equal(model.predict(x).probs.data, res.model.eval().predict(x).probs.data)

    def test_invalid_config(self, spec, tiny_model_cfg):
        with pytest.raises(ValueError):
            fit(tiny_model_cfg, spec, quick_cfg(batch_size=0))


class TestMaskIsolation:
    """Training must never touch ground-truth mask files."""

    @pytest.fixture
    def opened(self, monkeypatch):
        seen = []
        real_open, real_pil = builtins.open, Image.open

        def spy_open(file, *a, **kw):
            seen.append(str(file))
            return real_open(file, *a, **kw)

        def spy_pil(fp, *a, **kw):
            seen.append(str(fp))
            return real_pil(fp, *a, **kw)

        monkeypatch.setattr(builtins, "open", spy_open)
        monkeypatch.setattr(Image, "open", spy_pil)
        return seen

    def test_zero_mask_reads(self, spec, tiny_model_cfg, opened, tmp_path, synth_root):
        fit(tiny_model_cfg, spec, quick_cfg(val_metrics=False), LossConfig(), out_dir=tmp_path)
        mask_dir = str(synth_root / "masks")
        assert any("images" in f for f in opened)
        assert not [f for f in opened if f.startswith(mask_dir)]

    def test_instrumentation_sees_masks_when_enabled(self, spec, tiny_model_cfg, opened, synth_root):
        fit(tiny_model_cfg, spec, quick_cfg(max_epochs=1, val_metrics=True))
        assert [f for f in opened if f.startswith(str(synth_root / "masks"))]

from dataclasses import replace

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from crackseg.synthgen import SynthSpec, generate, generate_arrays, generate_one, line_image, rasterize_stroke


class TestGenerate:
    def test_deterministic(self):
        spec = SynthSpec(count=3, size=(32, 32), seed=5)
        a, b = generate_arrays(spec), generate_arrays(spec)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert not np.array_equal(generate_one(spec, 0)[0], generate_one(replace(spec, seed=6), 0)[0])

    def test_fraction_over_seeds(self):
        fractions = [generate_one(SynthSpec(seed=s), 0)[1].mean() for s in range(100)]
        assert 0.005 <= min(fractions) and max(fractions) <= 0.10

    def test_zero_strokes_empty(self):
        img, mask = generate_one(SynthSpec(size=(32, 32), min_strokes=0, max_strokes=0), 0)
        assert not mask.any()
        assert img.shape == (32, 32, 3) and img.dtype == np.uint8

    @pytest.mark.parametrize("seed", range(5))
    def test_strokes_darker_than_local_background(self, seed):
        spec = SynthSpec(size=(64, 64), seed=seed)
        img, mask = generate_one(spec, 0)
        # Background and grain are drawn before the stroke count, so a zero-stroke
        # image from the same seed is the exact local background.
        bg, _ = generate_one(replace(spec, min_strokes=0, max_strokes=0), 0)
        diff = bg.astype(int) - img.astype(int)
        on = mask.astype(bool)
        assert on.any()
        assert diff[on].min() >= spec.contrast_gap / 2 * 255
        assert not diff[~on].any()

    def test_files(self, tmp_path):
        stems = generate(SynthSpec(count=2, size=(16, 16)), tmp_path)
        assert stems == ["synth_0000", "synth_0001"]
        m = np.asarray(Image.open(tmp_path / "masks" / "synth_0001.png"))
        assert set(np.unique(m)) <= {0, 255}
        np.testing.assert_array_equal(m // 255, generate_one(SynthSpec(count=2, size=(16, 16)), 1)[1])

    @pytest.mark.parametrize(
        "kw",
        [{"size": (31, 32)}, {"min_strokes": 3, "max_strokes": 1}, {"noise_sigma": 0.1}, {"contrast_gap": 0.9}],
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw).validate()


class TestRaster:
    def test_straight_line(self):
        pts = np.stack([np.full(50, 4.0), np.linspace(0, 9, 50)], axis=1)
        m = rasterize_stroke(pts, 1, (8, 10))
        assert m[4].all() and m.sum() == 10

    def test_connected(self):
        pts = np.stack([np.linspace(0, 19, 80), np.linspace(0, 19, 80)], axis=1)
        _, n = ndimage.label(rasterize_stroke(pts, 1, (20, 20)))
        assert n == 1

    def test_line_image(self):
        img, mask = line_image(16, thickness=2)
        assert mask.sum() == 32 and mask[:, 7:9].all()
        np.testing.assert_array_equal(img[0][mask.astype(bool)], 1.0)
        np.testing.assert_array_equal(img[0][~mask.astype(bool)], 0.0)

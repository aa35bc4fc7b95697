import numpy as np
import pytest

from crackseg.nnops.gradcheck import check_gradients
from crackseg.nnops import functional as F
from crackseg.nnops.tensor import Tensor
from crackseg.sae import SaeConfig, ScaleAdaptiveEmbedder, flatten_tokens, to_spatial, to_tokens, unflatten_tokens


@pytest.fixture
def embedder():
    return ScaleAdaptiveEmbedder(SaeConfig(embed_dim=64), rng=np.random.default_rng(0), dtype=np.float64)


class TestEmbed:
    def test_shapes(self, embedder, rng):
        f = embedder(Tensor(rng.standard_normal((2, 3, 32, 32))))
        assert f.fine.shape == (2, 64, 32, 32)
        assert f.small.shape == (2, 64, 32, 32)
        assert f.large.shape == (2, 64, 16, 16)

    @pytest.mark.parametrize("h,w", [(16, 16), (20, 36), (64, 18)])
    def test_shapes_arbitrary_even(self, embedder, rng, h, w):
        f = embedder(Tensor(rng.standard_normal((1, 3, h, w))))
        assert f.large.shape[-2:] == (h // 2, w // 2)

    def test_odd_rejected_with_guidance(self, embedder):
        with pytest.raises(ValueError, match="resize"):
            embedder(Tensor(np.zeros((1, 3, 31, 32))))

    def test_channel_mismatch(self, embedder):
        with pytest.raises(ValueError, match="channels"):
            embedder(Tensor(np.zeros((1, 1, 32, 32))))

    def test_zero_input_zero_bias(self, embedder):
        for name in ("fine", "small", "large"):
            getattr(embedder, name).conv.bias.data[...] = 0
        f = embedder(Tensor(np.zeros((2, 3, 8, 8))))
        for m in f:
            np.testing.assert_array_equal(m.data, 0.0)

    def test_batch_mean_zero_per_channel(self, embedder, rng):
        f = embedder(Tensor(rng.standard_normal((3, 3, 12, 12))))
        for m in f:
            np.testing.assert_allclose(m.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)

    def test_gradcheck(self, rng):
        emb = ScaleAdaptiveEmbedder(SaeConfig(embed_dim=8), rng=np.random.default_rng(1), dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        probes = [rng.standard_normal(s) for s in ((1, 8, 8, 8), (1, 8, 8, 8), (1, 8, 4, 4))]

        def loss():
            f = emb(x)
            return sum((F.sum(m * p) for m, p in zip(f, probes)), Tensor(0.0))

        for r in check_gradients(loss, list(emb.named_parameters()), rtol=2e-2):
            assert r.ok, (r.name, r.max_rel_error)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SaeConfig(embed_dim=4).validate()
        with pytest.raises(ValueError, match="divisible"):
            SaeConfig(embed_dim=10).validate(heads=4)


class TestTokens:
    def test_order(self):
        x = Tensor(np.arange(8, dtype=float).reshape(1, 2, 2, 2))
        seq = flatten_tokens(x)
        assert seq.tokens.shape == (1, 4, 2)
        # Token y*W + x carries both channels of that pixel.
        np.testing.assert_array_equal(seq.tokens.data[0], [[0, 4], [1, 5], [2, 6], [3, 7]])

    def test_round_trip(self, embedder, rng):
        f = embedder(Tensor(rng.standard_normal((1, 3, 32, 32))))
        t = to_tokens(f)
        assert t.fine.tokens.shape[1] == 1024
        assert t.large.tokens.shape[1] == 256
        for a, b in zip(to_spatial(t), f):
            np.testing.assert_array_equal(a.data, b.data)

    def test_grid_mismatch(self):
        seq = flatten_tokens(Tensor(np.zeros((1, 2, 2, 2))))
        with pytest.raises(ValueError):
            unflatten_tokens(seq._replace(grid=(3, 3)))

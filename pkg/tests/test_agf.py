import numpy as np
import pytest

from crackseg.agf import AttentionGuidedFusion, SumFusion, fuse, fusion_weight_summary, split_concat
from crackseg.nnops import functional as F
from crackseg.nnops.gradcheck import check_gradients
from crackseg.nnops.tensor import Tensor
from crackseg.sae import ScaleFeatures


def feats(rng, b=2, d=8, h=8, requires_grad=False):
    return ScaleFeatures(
        Tensor(rng.standard_normal((b, d, h, h)), requires_grad=requires_grad),
        Tensor(rng.standard_normal((b, d, h, h)), requires_grad=requires_grad),
        Tensor(rng.standard_normal((b, d, h // 2, h // 2)), requires_grad=requires_grad),
    )


@pytest.fixture
def agf():
    return AttentionGuidedFusion(8, rng=np.random.default_rng(0), dtype=np.float64)


class TestFuse:
    def test_shapes(self, rng):
        agf = AttentionGuidedFusion(64, rng=np.random.default_rng(0))
        fused, st = fuse(feats(rng, d=64, h=32), agf)
        assert fused.shape == (2, 64, 32, 32)
        assert st.attn.shape == (2, 3, 32, 32)
        assert st.concat.shape == (2, 192, 32, 32)

    def test_zero_gate_halves(self, agf, rng):
        f = feats(rng)
        fused, st = agf(f)
        np.testing.assert_array_equal(st.attn, 0.5)
        np.testing.assert_allclose(fused.data, 0.5 * (st.large_proj + f.small.data + f.fine.data), atol=1e-14)
        assert fusion_weight_summary(st) == (0.5, 0.5, 0.5)

    def test_reconstruction_identity(self, agf, rng):
        agf.gate.weight.data[...] = rng.standard_normal(agf.gate.weight.shape)
        fused, st = agf(feats(rng))
        lg, sm, fi = split_concat(st.concat)
        ref = lg * st.attn[:, 0:1] + sm * st.attn[:, 1:2] + fi * st.attn[:, 2:3]
        np.testing.assert_array_equal(fused.data, ref)
        assert ((st.attn > 0) & (st.attn < 1)).all()

    def test_slice_mapping(self, agf, rng):
        """Gate channel i scales exactly slab i of [large_proj, small, fine]."""
        f = feats(rng)
        agf.gate.bias.data[...] = [20.0, -20.0, -20.0]
        fused, st = agf(f)
        np.testing.assert_allclose(fused.data, st.large_proj, atol=1e-7)
        agf.gate.bias.data[...] = [-20.0, -20.0, 20.0]
        fused, _ = agf(f)
        np.testing.assert_allclose(fused.data, f.fine.data, atol=1e-7)

    def test_batch_permutation(self, agf, rng):
        agf.gate.weight.data[...] = rng.standard_normal(agf.gate.weight.shape)
        f = feats(rng, b=3)
        perm = [2, 0, 1]
        fp = ScaleFeatures(*(Tensor(m.data[perm]) for m in f))
        np.testing.assert_allclose(agf(fp)[0].data, agf(f)[0].data[perm], atol=1e-12)

    def test_shape_mismatch(self, agf, rng):
        f = feats(rng)
        with pytest.raises(ValueError):
            agf(ScaleFeatures(f.fine, f.small, f.small))

    def test_gradcheck(self, rng):
        agf = AttentionGuidedFusion(4, rng=np.random.default_rng(0), dtype=np.float64)
        agf.gate.weight.data[...] = rng.standard_normal(agf.gate.weight.shape) * 0.3
        f = feats(rng, b=1, d=4, h=8, requires_grad=True)
        probe = rng.standard_normal((1, 4, 8, 8))
        tensors = [("fine", f.fine), ("small", f.small), ("large", f.large)] + list(agf.named_parameters())
        for r in check_gradients(lambda: F.sum(agf(f)[0] * probe), tensors, rtol=2e-2):
            assert r.ok, (r.name, r.max_rel_error)


class TestSumFusion:
    def test_definition(self, rng):
        sf = SumFusion(8, rng=np.random.default_rng(0), dtype=np.float64)
        f = feats(rng)
        out, state = sf(f)
        ref = sf.proj(F.bilinear_upsample(f.large)).data + f.small.data + f.fine.data
        np.testing.assert_allclose(out.data, ref)
        assert state is None

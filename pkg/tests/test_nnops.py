import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crackseg.nnops import functional as F
from crackseg.nnops import kernels
from crackseg.nnops import _kernels_py
from crackseg.nnops.gradcheck import check_gradients
from crackseg.nnops.module import BatchNorm2d, Conv2d, LayerNorm
from crackseg.nnops.tensor import GraphError, Parameter, Tensor, backward, no_grad


def leaf(arr):
    return Parameter(np.asarray(arr, dtype=np.float64))


def assert_grads(loss_fn, tensors, rtol=1e-3, samples=20):
    results = check_gradients(loss_fn, tensors, eps=1e-4, rtol=rtol, abs_floor=1e-6, samples=samples)
    for r in results:
        assert r.ok, f"{r.name}: max rel error {r.max_rel_error:.3g}, failures {r.failures[:3]}"


def brute_conv(x, w, b, stride, pad):
    bs, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bs, o, ho, wo))
    for n in range(bs):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, oc, i, j] = (patch * w[oc]).sum() + (b[oc] if b is not None else 0.0)
    return out


class TestTape:
    def test_sum_gradient_is_ones(self, rng):
        x = leaf(rng.standard_normal((3, 4)))
        backward(F.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_gradient(self, rng):
        x = leaf(rng.standard_normal(5))
        backward(F.sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_reuse_accumulates(self, rng):
        x = leaf(rng.standard_normal(4))
        backward(F.sum(x * 3.0 + x * 2.0))
        np.testing.assert_allclose(x.grad, np.full(4, 5.0))

    def test_second_backward_rejected(self, rng):
        x = leaf(rng.standard_normal(3))
        loss = F.sum(x * x)
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_detached_rejected(self, rng):
        x = leaf(rng.standard_normal(3))
        with pytest.raises(GraphError):
            backward(F.sum(x * x).detach())

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng.standard_normal(3))
        with no_grad():
            y = F.sum(x * x)
        assert not y.requires_grad

    def test_leaf_grads_accumulate_across_passes(self, rng):
        x = leaf(np.ones(2))
        backward(F.sum(x))
        backward(F.sum(x * 2.0))
        np.testing.assert_array_equal(x.grad, np.full(2, 3.0))


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 5, 5)))
        w = Tensor(np.eye(4).reshape(4, 4, 1, 1))
        out = F.conv2d(x, w, Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_stride2_shape(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), ((1, 3), 1, (0, 1)), ((3, 1), 1, (1, 0))])
    def test_matches_brute_force(self, rng, k, stride, pad):
        kh, kw = F._pair(k)
        ph, pw = F._pair(pad)
        x = rng.standard_normal((2, 3, 6, 7))
        w = rng.standard_normal((4, 3, kh, kw))
        b = rng.standard_normal(4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        if ph == pw:
            ref = brute_conv(x, w, b, stride, ph)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            ref = brute_conv(xp, w, b, stride, 0)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(3, 3, 3, 3\)"):
            F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 3, 3, 3))))

    def test_gradcheck(self, rng):
        x, w, b = leaf(rng.standard_normal((1, 2, 5, 5))), leaf(rng.standard_normal((3, 2, 3, 3))), leaf(rng.standard_normal(3))
        probe = rng.standard_normal((1, 3, 3, 3))
        assert_grads(lambda: F.sum(F.conv2d(x, w, b, 2, 1) * probe), [("x", x), ("w", w), ("b", b)])


class TestDepthwise:
    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        k = np.zeros((3, 1, 3, 3))
        k[:, 0, 1, 1] = 1
        np.testing.assert_array_equal(F.depthwise_conv2d(x, Tensor(k)).data, x.data)

    def test_ones_kernel_interior_sum(self):
        out = F.depthwise_conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.data[0, 0, 2, 2] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_kernel_count_mismatch(self):
        with pytest.raises(ValueError, match="kernel count"):
            F.depthwise_conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))))

    def test_matches_grouped_brute_force(self, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        k = rng.standard_normal((3, 1, 3, 3))
        out = F.depthwise_conv2d(Tensor(x), Tensor(k)).data
        for c in range(3):
            ref = brute_conv(x[:, c : c + 1], k[c : c + 1], None, 1, 1)
            np.testing.assert_allclose(out[:, c : c + 1], ref, atol=1e-12)

    def test_gradcheck(self, rng):
        x, k, b = leaf(rng.standard_normal((2, 3, 4, 4))), leaf(rng.standard_normal((3, 1, 3, 3))), leaf(rng.standard_normal(3))
        probe = rng.standard_normal((2, 3, 4, 4))
        assert_grads(lambda: F.sum(F.depthwise_conv2d(x, k, b) * probe), [("x", x), ("k", k), ("b", b)])


class TestKernelBackends:
    """The compiled kernels must agree with the numpy reference implementation."""

    @pytest.fixture(autouse=True)
    def _need_compiled(self):
        if "compiled" not in kernels.available_backends():
            pytest.skip("compiled extension not built")
        self.ext = kernels.available_backends()["compiled"]

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_im2col_col2im(self, rng, dtype):
        x = rng.standard_normal((2, 3, 7, 6)).astype(dtype)
        for args in [(3, 3, 1, 1, 1, 1), (3, 3, 2, 2, 1, 1), (1, 3, 1, 1, 0, 1), (3, 1, 1, 1, 1, 0)]:
            a = self.ext.im2col(x, *args)
            b = _kernels_py.im2col(x, *args)
            np.testing.assert_array_equal(a, b)
            cols = rng.standard_normal(a.shape).astype(dtype)
            ca = self.ext.col2im(cols, 2, 3, 7, 6, *args)
            cb = _kernels_py.col2im(cols, 2, 3, 7, 6, *args)
            np.testing.assert_allclose(ca, cb, rtol=1e-5 if dtype == np.float32 else 1e-12, atol=1e-5 if dtype == np.float32 else 1e-12)

    def test_depthwise(self, rng):
        x = rng.standard_normal((2, 4, 6, 5))
        w = rng.standard_normal((4, 3, 3))
        g = rng.standard_normal((2, 4, 6, 5))
        np.testing.assert_allclose(self.ext.depthwise_forward(x, w, 1, 1), _kernels_py.depthwise_forward(x, w, 1, 1), atol=1e-12)
        for a, b in zip(self.ext.depthwise_backward(g, x, w, 1, 1), _kernels_py.depthwise_backward(g, x, w, 1, 1)):
            np.testing.assert_allclose(a, b, atol=1e-11)


class TestNorms:
    def test_batchnorm_constant_channel_zero(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        bn = BatchNorm2d(3, dtype=np.float64)
        np.testing.assert_allclose(bn(x).data, 0.0, atol=1e-12)

    def test_batchnorm_standardises(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
        out = BatchNorm2d(3, dtype=np.float64)(x).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_batchnorm_running_stats(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        bn = BatchNorm2d(2, dtype=np.float64)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
        bn.eval()
        out = bn(Tensor(x)).data
        ref = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, ref)

    def test_batchnorm_single_element_rejected(self):
        with pytest.raises(ValueError, match="more than one"):
            BatchNorm2d(2)(Tensor(np.ones((1, 2, 1, 1), dtype=np.float32)))

    def test_batchnorm_gradcheck(self, rng):
        x, g, b = leaf(rng.standard_normal((2, 3, 4, 4))), leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.standard_normal(3))
        probe = rng.standard_normal((2, 3, 4, 4))
        rm, rv = np.zeros(3), np.ones(3)
        assert_grads(lambda: F.sum(F.batch_norm(x, g, b, rm.copy(), rv.copy(), True) * probe), [("x", x), ("g", g), ("b", b)])

    def test_layernorm_equal_token(self):
        out = LayerNorm(4, dtype=np.float64)(Tensor(np.full((1, 3, 4), 2.5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_layernorm_standardises(self, rng):
        out = LayerNorm(16, dtype=np.float64)(Tensor(rng.standard_normal((2, 5, 16)) * 4)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_channel_axis_equals_token_layout(self, rng):
        x = rng.standard_normal((2, 6, 3, 4))
        g, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
        spatial = F.layer_norm(Tensor(x), g, b, axis=1).data
        tokens = F.layer_norm(Tensor(x.transpose(0, 2, 3, 1)), g, b, axis=-1).data
        np.testing.assert_allclose(spatial, tokens.transpose(0, 3, 1, 2), atol=1e-12)

    def test_layernorm_gradcheck(self, rng):
        x, g, b = leaf(rng.standard_normal((2, 3, 6))), leaf(rng.uniform(0.5, 1.5, 6)), leaf(rng.standard_normal(6))
        probe = rng.standard_normal((2, 3, 6))
        assert_grads(lambda: F.sum(F.layer_norm(x, g, b) * probe), [("x", x), ("g", g), ("b", b)])


class TestActivations:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)

    def test_softmax_stable(self):
        out = F.softmax(Tensor(np.array([1000.0, 0.0]))).data
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)
        assert np.isfinite(F.softmax(Tensor(np.array([1e4, -1e4, 3.0]))).data).all()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
    def test_softmax_sums_to_one(self, vals):
        out = F.softmax(Tensor(np.array(vals))).data
        assert abs(out.sum() - 1) < 1e-6

    def test_sigmoid_and_relu(self):
        assert F.sigmoid(Tensor(np.array(0.0))).data == 0.5
        np.testing.assert_array_equal(F.relu(Tensor(-np.array([1.0, 2.5]))).data, [0.0, 0.0])

    def test_gelu_reference(self):
        from math import erf, sqrt

        xs = np.linspace(-4, 4, 17)
        ref = [x * 0.5 * (1 + erf(x / sqrt(2))) for x in xs]
        np.testing.assert_allclose(F.gelu(Tensor(xs)).data, ref, atol=1e-15)

    @pytest.mark.parametrize("op", ["sigmoid", "gelu", "relu", "softmax", "exp", "log", "sqrt", "abs"])
    def test_elementwise_gradcheck(self, rng, op):
        data = rng.standard_normal(8)
        if op in ("log", "sqrt"):
            data = np.abs(data) + 0.5
        if op in ("relu", "abs"):
            data = np.where(np.abs(data) < 0.05, 0.3, data)  # keep away from the kink
        x = leaf(data)
        probe = rng.standard_normal(8)
        fn = getattr(F, op)
        assert_grads(lambda: F.sum(fn(x) * probe), [("x", x)], samples=None)

    def test_channel_softmax_gradcheck(self, rng):
        x = leaf(rng.standard_normal((2, 2, 3, 3, 3)))
        probe = rng.standard_normal((2, 2, 3, 3, 3))
        assert_grads(lambda: F.sum(F.softmax(x, axis=2) * probe), [("x", x)])


class TestArithmeticGrads:
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_broadcast_binary(self, rng, op):
        a = leaf(rng.standard_normal((2, 3, 4)))
        b = leaf(rng.uniform(0.5, 2.0, (1, 3, 1)))
        probe = rng.standard_normal((2, 3, 4))
        fn = getattr(F, op)
        assert_grads(lambda: F.sum(fn(a, b) * probe), [("a", a), ("b", b)], samples=None)

    def test_reductions_and_shapes(self, rng):
        a = leaf(rng.standard_normal((2, 3, 4)))
        probe = rng.standard_normal((4, 2))

        def loss():
            t = F.transpose(F.reshape(a, (2, 12)), (1, 0))
            m = F.mean(a, axis=(0, 2))
            return F.sum(F.matmul(t[:4] * 1.0, Tensor(np.eye(2))) * probe) + F.sum(m * m) + F.sum(F.power(a, 2.0))

        assert_grads(loss, [("a", a)], samples=None)

    def test_concat_and_index(self, rng):
        a, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((2, 2)))
        probe = rng.standard_normal((2, 5))

        def loss():
            c = F.concat([a, b], axis=1)
            return F.sum(c * probe) + F.sum(F.index(c, (slice(None), [0, 0, 4])))

        assert_grads(loss, [("a", a), ("b", b)], samples=None)

    def test_clamp(self, rng):
        a = leaf(np.array([-2.0, -0.5, 0.2, 0.7, 3.0]))
        backward(F.sum(F.clamp(a, -1.0, 1.0)))
        np.testing.assert_array_equal(a.grad, [0, 1, 1, 1, 0])


class TestResampling:
    GOLDEN = np.array(
        [
            [1.00, 1.25, 1.75, 2.00],
            [1.50, 1.75, 2.25, 2.50],
            [2.50, 2.75, 3.25, 3.50],
            [3.00, 3.25, 3.75, 4.00],
        ]
    )

    def test_golden_2x2(self):
        out = F.bilinear_upsample(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
        np.testing.assert_allclose(out.data[0, 0], self.GOLDEN, atol=1e-15)

    def test_constant_preserved(self):
        out = F.bilinear_upsample(Tensor(np.full((1, 2, 3, 5), 0.7)), 2)
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_array_equal(out.data, 0.7)

    def test_only_scale_two(self):
        with pytest.raises(ValueError):
            F.bilinear_upsample(Tensor(np.ones((1, 1, 2, 2))), 3)

    def test_bilinear_rows_sum_to_one(self):
        for n_in, n_out in [(2, 4), (5, 10), (7, 3), (16, 256)]:
            np.testing.assert_allclose(F.bilinear_matrix(n_in, n_out).sum(axis=1), 1.0)

    def test_adaptive_pool_brute_force(self, rng):
        x = rng.standard_normal((1, 2, 10, 7))
        out = F.adaptive_avg_pool2d(Tensor(x), (4, 3)).data
        for i in range(4):
            for j in range(3):
                ys = slice((i * 10) // 4, -((-(i + 1) * 10) // 4))
                xs = slice((j * 7) // 3, -((-(j + 1) * 7) // 3))
                np.testing.assert_allclose(out[:, :, i, j], x[:, :, ys, xs].mean(axis=(2, 3)))

    def test_upsample_gradcheck(self, rng):
        x = leaf(rng.standard_normal((1, 2, 3, 4)))
        probe = rng.standard_normal((1, 2, 6, 8))
        assert_grads(lambda: F.sum(F.bilinear_upsample(x) * probe), [("x", x)])

    def test_pool_gradcheck(self, rng):
        x = leaf(rng.standard_normal((1, 2, 9, 9)))
        probe = rng.standard_normal((1, 2, 4, 4))
        assert_grads(lambda: F.sum(F.adaptive_avg_pool2d(x, (4, 4)) * probe), [("x", x)])


class TestModuleState:
    def test_state_dict_round_trip(self, rng):
        a = Conv2d(2, 3, 3, padding=1, rng=np.random.default_rng(0))
        b = Conv2d(2, 3, 3, padding=1, rng=np.random.default_rng(1))
        b.load_state_dict(a.state_dict())
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_bad_shape_leaves_no_partial_state(self):
        a = Conv2d(2, 3, 3, rng=np.random.default_rng(0))
        before = a.state_dict()
        bad = dict(before)
        bad["bias"] = np.zeros(5, dtype=np.float32)
        bad["weight"] = np.zeros_like(before["weight"])
        with pytest.raises(ValueError):
            a.load_state_dict(bad)
        np.testing.assert_array_equal(a.weight.data, before["weight"])

    def test_init_bound(self):
        conv = Conv2d(4, 8, 3, rng=np.random.default_rng(0))
        assert np.abs(conv.weight.data).max() <= 1 / np.sqrt(36)

"""Tests for the tensor engine, layers and the gradient checker."""
import numpy as np
import pytest

from mvheat import tensor as T
from mvheat.gradcheck import grad_check
from mvheat.nn import LN_EPS, LayerNorm, Linear, channel_linear, conv2d, depthwise_conv2d, layer_norm
from mvheat.tensor import ConfigError, Parameter, ShapeError, Tensor


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_depthwise(x, kernel, stride, padding):
    n, c, h, w = x.shape
    k = kernel.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, ch, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, ch, i, j] = np.sum(patch * kernel[ch])
    return out


def naive_conv(x, weight, stride, padding):
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    out[b, o, i, j] = np.sum(xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k] * weight[o])
    return out


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 4))
        np.testing.assert_array_equal(T.matmul(np.eye(4), x).data, x)

    def test_identity_right(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, np.eye(2)).data, a)

    def test_column_vector(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        out = T.matmul(a, b).data
        np.testing.assert_array_equal(out, [[17.0], [39.0]])
        np.testing.assert_array_equal(out, naive_matmul(a, b))

    def test_against_loop_oracle(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(np.ones((2, 3)), np.ones((4, 5)))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_gradients_reach_both_operands(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        T.matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


class TestElementwise:
    def test_exp_zero(self):
        np.testing.assert_array_equal(T.elementwise(np.zeros((2, 3)), "exp").data, np.ones((2, 3)))

    def test_softplus_zero_is_ln2(self):
        np.testing.assert_allclose(T.elementwise(np.zeros(4), "softplus").data, np.log(2.0), rtol=1e-15)

    def test_sigmoid_saturates(self):
        assert abs(T.elementwise(np.array([40.0]), "sigmoid").item() - 1.0) < 1e-6

    def test_softplus_large_input_is_stable(self):
        assert T.softplus(np.array([800.0])).item() == pytest.approx(800.0)

    def test_gelu_known_values(self):
        from scipy.stats import norm
        x = np.array([-2.0, -0.5, 0.0, 1.0, 3.0])
        np.testing.assert_allclose(T.gelu(x).data, x * norm.cdf(x), rtol=1e-12)

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.elementwise(np.ones((2, 2)), "add", np.ones((2, 3)))

    def test_binary_forms(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        np.testing.assert_array_equal(T.elementwise(a, "add", b).data, [4.0, 6.0])
        np.testing.assert_array_equal(T.elementwise(a, "mul", b).data, [3.0, 8.0])

    def test_unknown_function(self):
        with pytest.raises(ConfigError):
            T.elementwise(np.ones(2), "tanh")

    @pytest.mark.parametrize("f", ["exp", "sigmoid", "gelu", "softplus"])
    def test_unary_gradients_over_seeds(self, f):
        for seed in range(20):
            x = Tensor(np.random.default_rng(seed).uniform(-1, 1, size=(3, 4)))
            report = grad_check(lambda a: T.elementwise(a, f), [x], name=f, seed=seed)
            assert report.passed, report.line()

    @pytest.mark.parametrize("f", ["add", "mul"])
    def test_binary_gradients_over_seeds(self, f):
        for seed in range(20):
            g = np.random.default_rng(seed)
            x, y = Tensor(g.uniform(-1, 1, (3, 4))), Tensor(g.uniform(-1, 1, (3, 4)))
            report = grad_check(lambda a, b: T.elementwise(a, f, b), [x, y], name=f, seed=seed)
            assert report.passed, report.line()


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        x = np.full((2, 4, 3, 3), 7.0)
        out = layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_channels(self):
        x = np.array([1.0, -1.0]).reshape(1, 2, 1, 1)
        out = layer_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data.ravel()
        expected = np.array([1.0, -1.0]) / np.sqrt(1.0 + LN_EPS)
        np.testing.assert_allclose(out, expected, rtol=1e-14)
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)

    def test_affine_collapse(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(np.full(3, 5.0)))
        np.testing.assert_array_equal(out.data, 5.0)

    def test_moments(self, rng):
        x = rng.normal(2.0, 3.0, size=(2, 16, 5, 5))
        out = LayerNorm(16)(Tensor(x)).data
        assert np.abs(out.mean(axis=1)).max() < 1e-6
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-5


class TestConvolution:
    def test_delta_kernel_is_identity(self):
        x = np.ones((1, 1, 3, 3))
        kernel = np.zeros((1, 3, 3))
        kernel[0, 1, 1] = 1.0
        np.testing.assert_array_equal(depthwise_conv2d(x, kernel, 1, 1).data, x)

    def test_averaging_kernel_preserves_interior(self):
        x = np.full((1, 2, 5, 5), 3.5)
        out = depthwise_conv2d(x, np.full((2, 3, 3), 1.0 / 9.0), 1, 1).data
        np.testing.assert_allclose(out[..., 1:-1, 1:-1], 3.5, rtol=1e-14)

    def test_ramp_box_kernel_matches_loop(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        kernel = np.ones((1, 3, 3))
        np.testing.assert_allclose(depthwise_conv2d(x, kernel, 1, 1).data, naive_depthwise(x, kernel, 1, 1))
        np.testing.assert_allclose(depthwise_conv2d(x, kernel, 1, 0).data, [[[[45.0, 54.0], [81.0, 90.0]]]])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 2), (3, 0)])
    def test_random_matches_loop(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 7, 6))
        kernel = rng.normal(size=(3, 3, 3))
        np.testing.assert_allclose(depthwise_conv2d(x, kernel, stride, padding).data,
                                   naive_depthwise(x, kernel, stride, padding), atol=1e-12)

    def test_output_extent(self):
        out = depthwise_conv2d(np.zeros((1, 1, 9, 9)), np.zeros((1, 5, 5)), 2, 1)
        assert out.shape == (1, 1, (9 + 2 - 5) // 2 + 1, (9 + 2 - 5) // 2 + 1)

    def test_empty_output_is_config_error(self):
        with pytest.raises(ConfigError):
            depthwise_conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 5, 5)), 1, 0)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            depthwise_conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 2, 2)), 1, 0)

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (2, 0, 2)])
    def test_dense_conv_matches_loop(self, rng, stride, padding, k):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, k, k))
        np.testing.assert_allclose(conv2d(x, w, stride=stride, padding=padding).data,
                                   naive_conv(x, w, stride, padding), atol=1e-12)

    def test_channel_linear(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        w, b = rng.normal(size=(3, 6)), rng.normal(size=6)
        expected = np.einsum("nchw,co->nohw", x, w) + b[None, :, None, None]
        np.testing.assert_allclose(channel_linear(x, w, b).data, expected, atol=1e-12)


class TestTape:
    def test_parameter_gradient_starts_at_zero(self):
        p = Parameter(np.ones((2, 3)))
        assert p.grad.shape == p.shape
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_gradients_accumulate_and_zero(self, rng):
        p = Parameter(rng.normal(size=3))
        (p * 2.0).sum().backward()
        (p * 3.0).sum().backward()
        np.testing.assert_allclose(p.grad, 5.0)
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_backward_of_sum_is_sum_of_backwards(self, rng):
        x = rng.normal(size=(3, 4))
        w = Parameter(rng.normal(size=(4, 2)))

        def l1():
            return T.gelu(T.matmul(Tensor(x), w)).sum()

        def l2():
            return (T.sigmoid(T.matmul(Tensor(x), w)) * 3.0).mean()

        (l1() + l2()).backward()
        joint = w.grad.copy()
        w.zero_grad()
        l1().backward()
        l2().backward()
        np.testing.assert_allclose(joint, w.grad, rtol=1e-13, atol=1e-15)

    def test_rerun_is_bit_identical(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        lin = Linear(3, 5, rng)

        def run():
            lin.zero_grad()
            h = channel_linear(Tensor(x), lin.weight, lin.bias)
            T.softplus(h).mean().backward()
            return lin.weight.grad.copy(), lin.bias.grad.copy()

        a, b = run(), run()
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_broadcast_gradient_is_summed(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_no_grad_records_nothing(self):
        p = Parameter(np.ones(2))
        with T.no_grad():
            y = p * 2.0
        assert not y.requires_grad

    def test_precision_switch(self):
        with T.precision(32):
            assert Tensor([1, 2]).dtype == np.float32
            assert Parameter(np.zeros(2)).dtype == np.float32
        assert Tensor([1, 2]).dtype == np.float64

    def test_straight_through(self):
        soft = Tensor(np.array([[0.2, 0.8]]), requires_grad=True)
        hard = T.straight_through(soft, np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(hard.data, [[0.0, 1.0]])
        (hard * Tensor(np.array([[3.0, 5.0]]))).sum().backward()
        np.testing.assert_array_equal(soft.grad, [[3.0, 5.0]])


class TestGradCheck:
    def test_linear_map_is_exact(self, rng):
        w = rng.normal(size=(4, 3))
        report = grad_check(lambda x: T.matmul(x, Tensor(w)), [Tensor(rng.normal(size=(2, 4)))])
        assert report.passed and report.max_rel_error < 1e-9

    def test_dct_heat_chain(self, rng):
        from mvheat.heat import heat_multiplier
        from mvheat.transforms import dct2, frequency_grid, idct2
        grid = frequency_grid(8, 8, "dct")
        k = Tensor(rng.uniform(0.1, 1.0, size=(8, 8)))
        report = grad_check(lambda x: idct2(dct2(x) * heat_multiplier(k, 1.0, grid)),
                            [Tensor(rng.uniform(-1, 1, size=(8, 8)))])
        assert report.passed and report.max_rel_error < 1e-4

    def test_gelu_random_points(self, rng):
        report = grad_check(T.gelu, [Tensor(rng.uniform(-3, 3, size=(5, 5)))], name="gelu")
        assert report.passed and report.max_rel_error < 1e-4

    def test_non_finite_gradient_fails_with_name(self):
        def bad(x):
            return Tensor._result(x.data.copy(), (x,), lambda g: x._accum(g * np.nan))

        report = grad_check(bad, [Tensor(np.ones(3))], name="bad_op")
        assert not report.passed
        assert "bad_op" in report.line() and "non-finite" in report.message

    def test_wrong_gradient_fails(self):
        def wrong(x):
            return Tensor._result(x.data ** 2, (x,), lambda g: x._accum(g * x.data))

        assert not grad_check(wrong, [Tensor(np.array([0.5, -0.7]))]).passed

    def test_runs_at_64_bit(self):
        with T.precision(32):
            dtypes = []

            def probe(x):
                dtypes.append(x.dtype)
                return x * 2.0

            grad_check(probe, [Tensor(np.ones(2, dtype=np.float32))])
        assert set(dtypes) == {np.dtype(np.float64)}

import numpy as np
import pytest

from vik import tensor as T
from vik.errors import ConfigError, DimensionError, NumericalError


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        y = T.softmax(rng.standard_normal((5, 7)))
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(y > 0)

    def test_shift_invariant(self, rng):
        v = rng.standard_normal((3, 4))
        np.testing.assert_allclose(T.softmax(v), T.softmax(v + 100.0), atol=1e-12)

    def test_large_logits_stay_finite(self):
        y = T.softmax(np.array([[1000.0, 0.0]]))
        np.testing.assert_allclose(y, [[1.0, 0.0]], atol=1e-12)

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax(np.zeros((2, 0)))

    def test_backward_matches_finite_difference(self, rng):
        v = rng.standard_normal((2, 3))
        r = rng.standard_normal((2, 3))
        analytic = T.softmax_backward(T.softmax(v), r)
        numeric = numeric_grad(lambda z: float(np.sum(T.softmax(z) * r)), v)
        np.testing.assert_allclose(analytic, numeric, atol=1e-8)


class TestLinear:
    def test_matmul_agrees_with_numpy(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(T.matmul(a, b), a @ b, atol=1e-12)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\)"):
            T.matmul(np.zeros((3, 4)), np.zeros((5, 2)))

    def test_linear_over_leading_axes(self, rng):
        x = rng.standard_normal((2, 3, 4))
        w, b = rng.standard_normal((4, 6)), rng.standard_normal(6)
        np.testing.assert_allclose(T.linear(x, w, b), x @ w + b, atol=1e-12)

    def test_linear_backward(self, rng):
        x, w = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))
        r = rng.standard_normal((2, 3, 2))
        dx, dw, db = T.linear_backward(x, w, r)
        np.testing.assert_allclose(dx, numeric_grad(lambda z: float(np.sum(T.linear(z, w) * r)), x), atol=1e-7)
        np.testing.assert_allclose(dw, numeric_grad(lambda z: float(np.sum(T.linear(x, z) * r)), w), atol=1e-7)
        np.testing.assert_allclose(db, r.reshape(-1, 2).sum(axis=0))

    def test_non_finite_result_names_op(self):
        with pytest.raises(NumericalError, match="linear"):
            T.linear(np.array([[np.inf]]), np.array([[0.0]]))


class TestActivations:
    @pytest.mark.parametrize("fn, back", [(T.gelu, T.gelu_backward), (T.relu, T.relu_backward)])
    def test_backward(self, rng, fn, back):
        x = rng.standard_normal((4, 5)) + 0.01
        r = rng.standard_normal((4, 5))
        numeric = numeric_grad(lambda z: float(np.sum(fn(z) * r)), x)
        np.testing.assert_allclose(back(x, r), numeric, atol=1e-6)

    def test_gelu_limits(self):
        assert T.gelu(np.array(0.0)) == 0.0
        np.testing.assert_allclose(T.gelu(np.array([10.0, -10.0])), [10.0, 0.0], atol=1e-6)


class TestDepthwiseConvAxis:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        k = np.tile([0.0, 1.0, 0.0], (3, 1))
        for axis in ("horizontal", "vertical"):
            np.testing.assert_array_equal(T.depthwise_conv_axis(x, k, axis), x)

    @pytest.mark.parametrize("axis, dim", [("horizontal", 3), ("vertical", 2)])
    def test_shift_kernel_moves_along_axis(self, rng, axis, dim):
        x = rng.standard_normal((1, 2, 4, 4))
        k = np.tile([1.0, 0.0, 0.0], (2, 1))
        out = T.depthwise_conv_axis(x, k, axis)
        expected = np.roll(x, 1, axis=dim)
        index = [slice(None)] * 4
        index[dim] = 0
        expected[tuple(index)] = 0.0
        np.testing.assert_array_equal(out, expected)

    def test_shape_preserved(self, rng):
        x = rng.standard_normal((2, 3, 5, 7))
        assert T.depthwise_conv_axis(x, rng.standard_normal((3, 5)), "vertical").shape == x.shape

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            T.depthwise_conv_axis(np.zeros((1, 1, 4, 4)), np.zeros((1, 4)), "horizontal")

    def test_bad_axis(self):
        with pytest.raises(ConfigError):
            T.depthwise_conv_axis(np.zeros((1, 1, 4, 4)), np.zeros((1, 3)), "diagonal")

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.depthwise_conv_axis(np.zeros((1, 2, 4, 4)), np.zeros((3, 3)), "horizontal")

    @pytest.mark.parametrize("axis", ["horizontal", "vertical"])
    def test_backward(self, rng, axis):
        x, k = rng.standard_normal((2, 2, 3, 4)), rng.standard_normal((2, 3))
        r = rng.standard_normal(x.shape)
        dx, dk = T.depthwise_conv_axis_backward(x, k, axis, r)
        np.testing.assert_allclose(dx, numeric_grad(lambda z: float(np.sum(T.depthwise_conv_axis(z, k, axis) * r)), x), atol=1e-7)
        np.testing.assert_allclose(dk, numeric_grad(lambda z: float(np.sum(T.depthwise_conv_axis(x, z, axis) * r)), k), atol=1e-7)


class TestPoolingAndNorm:
    def test_global_avg_pool(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_allclose(T.global_avg_pool(x), x.mean(axis=(2, 3)))
        dy = rng.standard_normal((2, 3))
        np.testing.assert_allclose(T.global_avg_pool_backward(x.shape, dy).sum(axis=(2, 3)), dy)

    def test_layer_norm_normalises(self, rng):
        x = rng.standard_normal((4, 6)) * 3 + 2
        y = T.layer_norm(x, np.ones(6), np.zeros(6))
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_layer_norm_rejects_bad_eps_and_affine(self):
        with pytest.raises(ConfigError):
            T.layer_norm(np.zeros((2, 3)), np.ones(3), np.zeros(3), eps=0.0)
        with pytest.raises(DimensionError):
            T.layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(4))

    def test_layer_norm_backward(self, rng):
        x = rng.standard_normal((3, 5))
        g = rng.standard_normal(5)
        r = rng.standard_normal((3, 5))
        dx, dgamma, dbeta = T.layer_norm_backward(x, g, r)
        b = np.zeros(5)
        np.testing.assert_allclose(dx, numeric_grad(lambda z: float(np.sum(T.layer_norm(z, g, b) * r)), x), atol=1e-6)
        np.testing.assert_allclose(dgamma, numeric_grad(lambda z: float(np.sum(T.layer_norm(x, z, b) * r)), g), atol=1e-6)
        np.testing.assert_allclose(dbeta, r.sum(axis=0))


class TestEnsureFinite:
    def test_reports_index(self):
        x = np.zeros((2, 3))
        x[1, 2] = np.nan
        with pytest.raises(NumericalError, match=r"\(1, 2\)"):
            T.ensure_finite(x, "scan")


class TestBlend:
    def test_per_image_weights(self, rng):
        a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
        weights = np.array([[1.0, 0.0], [0.25, 0.75]])
        out = T.blend(weights, a, b)
        np.testing.assert_array_equal(out[0], a[0])
        np.testing.assert_allclose(out[1], 0.25 * a[1] + 0.75 * b[1], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.blend(np.ones((2, 2)), np.zeros((3, 1)), np.zeros((3, 1)))


class TestOpCounting:
    @pytest.mark.parametrize("spec, shapes, units", [
        ("ik,kj->ij", [(2, 3), (3, 4)], 24),
        ("...k,kn->...n", [(5, 2, 3), (3, 4)], 5 * 2 * 3 * 4),
        ("bcn,rn->bcr", [(1, 4, 16), (2, 16)], 4 * 16 * 2),
        ("bchw,bchw->b", [(2, 3, 4, 5), (2, 3, 4, 5)], 120),
    ])
    def test_einsum_units(self, spec, shapes, units):
        operands = [np.zeros(s) for s in shapes]
        assert T.einsum_units(spec, *operands) == units
        with T.counting() as counter:
            T.einsum(spec, *operands)
        assert counter[T.UNATTRIBUTED] == units

    def test_primitives_charge_from_their_operands(self, rng):
        x = rng.standard_normal((1, 3, 4, 6))
        with T.counting() as counter:
            with T.charged_to("conv"):
                T.depthwise_conv_axis(x, np.ones((3, 5)), "vertical")
            with T.charged_to("norm"):
                T.layer_norm(x, np.ones(6), np.zeros(6))
            with T.charged_to("pool"):
                T.global_avg_pool(x)
            with T.charged_to("act"):
                T.gelu(x)
                T.relu(x)
            T.softmax(x)
        assert dict(counter) == {"conv": 5 * 72, "norm": 4 * 72, "pool": 72, "act": 72}

    def test_scopes_nest_and_none_keeps_outer(self):
        with T.counting() as counter:
            with T.charged_to("outer"):
                T.charge(1)
                with T.charged_to(None):
                    T.charge(2)
                with T.charged_to("inner"):
                    T.charge(4)
                T.charge(8)
        assert dict(counter) == {"outer": 11, "inner": 4}

    def test_no_counter_is_a_no_op(self):
        T.charge(5)
        with T.counting() as counter:
            pass
        assert not counter

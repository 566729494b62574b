import numpy as np
import pytest

from vik.errors import CheckFailure, ConfigError, DimensionError, NumericalError
from vik.grad import (
    LAYER_CHECKS,
    GradCheckReport,
    GroupResult,
    backward,
    check_layer,
    finite_diff_check,
    relative_error,
    require_pass,
    run_gradcheck,
)
from vik.mixer import AxisMix, TokenMixer
from vik.nn import Linear

LAYERS = [name for name in LAYER_CHECKS if name != "backbone"]


def quadratic(scale=1.0):
    def fn(params):
        theta = params["theta"]
        return 0.5 * float(np.sum(theta**2)), {"theta": scale * theta}

    return fn


class TestBackward:
    def test_checks_upstream_shape(self, rng):
        layer = Linear(3, 2, rng, dtype=np.float64)
        _, tape = layer.forward(rng.standard_normal((4, 3)))
        with pytest.raises(DimensionError, match=r"\(4, 3\)"):
            backward(layer, tape, np.ones((4, 3)))

    def test_delegates_to_layer(self, rng):
        layer = Linear(3, 2, rng, dtype=np.float64)
        x = rng.standard_normal((4, 3))
        _, tape = layer.forward(x)
        dx, grads = backward(layer, tape, np.ones((4, 2)))
        assert dx.shape == x.shape
        np.testing.assert_allclose(grads["weight"], x.sum(axis=0)[:, None] * np.ones((1, 2)))
        np.testing.assert_allclose(grads["bias"], [4.0, 4.0])



class TestMixerBackward:
    @pytest.fixture
    def mixer(self, rng, small_mixer):
        return TokenMixer(small_mixer, 24, rng).astype(np.float64)

    def grads_for(self, layer, x, dy):
        _, tape = layer.forward(x)
        return backward(layer, tape, dy)

    def test_zero_upstream_gives_zero_gradients(self, rng, mixer):
        x = rng.standard_normal((2, 4, 4, 6))
        dx, grads = self.grads_for(mixer, x, np.zeros_like(x))
        assert set(grads) == set(mixer.parameters())
        assert not np.any(dx)
        for name, g in grads.items():
            assert not np.any(g), name

    def test_backward_is_linear_in_upstream(self, rng, mixer):
        x = rng.standard_normal((2, 4, 4, 6))
        dy1, dy2 = rng.standard_normal((2, *x.shape))
        a, b = 0.7, -1.3
        dx1, g1 = self.grads_for(mixer, x, dy1)
        dx2, g2 = self.grads_for(mixer, x, dy2)
        dx, g = self.grads_for(mixer, x, a * dy1 + b * dy2)
        np.testing.assert_allclose(dx, a * dx1 + b * dx2, rtol=1e-9, atol=1e-10)
        for name in g:
            np.testing.assert_allclose(g[name], a * g1[name] + b * g2[name], rtol=1e-9, atol=1e-10, err_msg=name)

    def test_blend_logit_gradient_sums_to_zero(self, rng):
        mix = AxisMix(4, 3, 8, rng).astype(np.float64)
        y = rng.standard_normal((1, 4, 5, 5))
        _, grads = self.grads_for(mix, y, rng.standard_normal(y.shape))
        dlogits = grads["reweight.fc2.bias"]
        assert np.abs(dlogits).max() > 1e-6
        assert abs(dlogits.sum()) < 1e-10


class TestFiniteDiffCheck:
    def test_exact_gradient_passes(self, rng):
        report = finite_diff_check(quadratic(), {"theta": rng.standard_normal((3, 4))})
        assert report.passed
        assert report.groups[0].n_checked == 12

    def test_wrong_gradient_fails(self, rng):
        report = finite_diff_check(quadratic(2.0), {"theta": rng.standard_normal(5) + 3.0})
        assert not report.passed
        assert report.failures()[0].name == "theta"
        assert report.groups[0].max_rel_err == pytest.approx(0.5, rel=1e-4)

    def test_params_restored(self, rng):
        theta = rng.standard_normal(4)
        before = theta.copy()
        finite_diff_check(quadratic(), {"theta": theta})
        np.testing.assert_array_equal(theta, before)

    def test_large_groups_are_sampled(self, rng):
        report = finite_diff_check(quadratic(), {"theta": rng.standard_normal(1000)}, max_coords=16)
        assert report.groups[0].n_checked == 16

    def test_non_positive_eps(self, rng):
        with pytest.raises(ConfigError):
            finite_diff_check(quadratic(), {"theta": np.ones(2)}, eps=0.0)

    def test_non_finite_loss_names_coordinate(self):
        def fn(params):
            a = params["a"]
            loss = np.nan if a[1] > 1.0 else float(a.sum())
            return loss, {"a": np.ones_like(a)}

        with pytest.raises(NumericalError, match=r"a\[1\]"):
            finite_diff_check(fn, {"a": np.array([0.0, 1.0])})

    def test_relative_error_floor(self):
        np.testing.assert_allclose(relative_error(np.array([1.0, 0.0]), np.array([0.5, 0.0])), [0.5, 0.0])

    def test_table_lists_every_group(self):
        report = GradCheckReport(scope="x", eps=1e-5, tol=1e-4, atol=1e-7, groups=[
            GroupResult(name="x/a", max_rel_err=1e-9, max_abs_err=0.0, n_checked=3, passed=True),
            GroupResult(name="x/b", max_rel_err=0.3, max_abs_err=1.0, n_checked=3, passed=False),
        ])
        table = report.to_table()
        assert "x/a" in table and "PASS" in table
        assert "x/b" in table and "FAIL" in table
        with pytest.raises(CheckFailure, match="x/b"):
            require_pass([report])


class TestLayerChecks:
    @pytest.mark.parametrize("name", LAYERS)
    def test_layer_gradients(self, name):
        report = check_layer(name, max_coords=48)
        assert report.passed, report.to_table()
        assert any(g.name == f"{name}/input" for g in report.groups)

    def test_backbone_sampled(self, tiny_config):
        report = check_layer("backbone", max_coords=4, backbone_config=tiny_config)
        assert report.passed, report.to_table()

    def test_unknown_layer(self):
        with pytest.raises(ConfigError, match="patch_kan"):
            check_layer("conv3d")

    def test_scope_selects_one_layer(self):
        reports = run_gradcheck("lowrank_global", max_coords=8)
        assert [r.scope for r in reports] == ["lowrank_global"]

    def test_corrupted_backward_is_caught(self, monkeypatch):
        from vik.mixer import LowRankGlobal

        original = LowRankGlobal.backward

        def broken(self, tape, dout):
            dx, grads = original(self, tape, dout)
            return dx, {k: 2 * v for k, v in grads.items()}

        monkeypatch.setattr(LowRankGlobal, "backward", broken)
        report = check_layer("lowrank_global", max_coords=16)
        failing = {g.name for g in report.failures()}
        assert failing == {"lowrank_global/P", "lowrank_global/Q"}

    @pytest.mark.slow
    def test_full_suite_256_coordinates(self, tiny_config):
        reports = run_gradcheck("all", backbone_config=tiny_config)
        require_pass(reports)
        assert max(g.n_checked for r in reports for g in r.groups) == 256

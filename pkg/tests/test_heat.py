"""Tests for the heat conduction operator, its diffusivity maps and the finite-difference oracle."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvheat.gradcheck import grad_check
from mvheat.heat import (EXPERTS, DiffusivityError, DiffusivityPredictor, FrequencyEmbedding, HCOConfig,
                         heat_multiplier, hco_apply, mirror_frequencies, predict_diffusivity)
from mvheat.oracle import OracleGrid, pde_oracle_solve, stable_dt
from mvheat.tensor import ConfigError, ShapeError, Tensor, precision
from mvheat.transforms import frequency_grid

REFINEMENTS = (2, 4, 8, 16)


def random_k(rng, shape, low=0.05, high=1.5):
    return rng.uniform(low, high, size=shape)


class TestMultiplier:
    def test_dc_is_one(self, rng):
        m = heat_multiplier(random_k(rng, (6, 6)), 2.0, frequency_grid(6, 6, "dct")).data
        assert m[0, 0] == 1.0
        assert np.all((m > 0) & (m <= 1))

    def test_closed_form(self):
        grid = frequency_grid(4, 4, "dct")
        m = heat_multiplier(np.full((4, 4), 0.3), 0.7, grid).data
        np.testing.assert_allclose(m, np.exp(-0.3 * 0.7 * grid.squared_norm()), rtol=1e-15)

    def test_negative_k_rejected(self):
        k = np.ones((3, 3))
        k[1, 2] = -1e-3
        with pytest.raises(DiffusivityError):
            heat_multiplier(k, 1.0, frequency_grid(3, 3))

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_time_rejected(self, t):
        with pytest.raises(ConfigError):
            heat_multiplier(np.ones((2, 2)), t, frequency_grid(2, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            heat_multiplier(np.ones((3, 3)), 1.0, frequency_grid(4, 4))


class TestInvariants:
    @pytest.mark.parametrize("expert", EXPERTS)
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1), t1=st.floats(0.05, 2.0), t2=st.floats(0.05, 2.0))
    def test_semigroup(self, expert, seed, t1, t2):
        rng = np.random.default_rng(seed)
        u, k = rng.normal(size=(8, 8)), random_k(rng, (8, 8))
        with precision(64):
            two = hco_apply(hco_apply(u, expert, k, t1), expert, k, t2).data
            one = hco_apply(u, expert, k, t1 + t2).data
        assert np.max(np.abs(two - one)) < 1e-9

    @pytest.mark.parametrize("expert", EXPERTS)
    def test_contraction_and_mean(self, expert):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            u, k = rng.normal(size=(2, 16, 16)), random_k(rng, (16, 16))
            out = hco_apply(u, expert, k, rng.uniform(0.1, 3.0)).data
            assert np.linalg.norm(out) <= np.linalg.norm(u) * (1 + 1e-12)
            np.testing.assert_allclose(out.mean(axis=(-2, -1)), u.mean(axis=(-2, -1)), atol=1e-12)

    @pytest.mark.parametrize("expert", EXPERTS)
    def test_zero_diffusivity_is_identity(self, rng, expert):
        u = rng.normal(size=(8, 8))
        np.testing.assert_allclose(hco_apply(u, expert, np.zeros((8, 8)), 1.0).data, u, atol=1e-12)

    @pytest.mark.parametrize("expert", EXPERTS)
    def test_constant_field_is_fixed_point(self, rng, expert):
        u = np.full((8, 8), 2.5)
        np.testing.assert_allclose(hco_apply(u, expert, random_k(rng, (8, 8)), 3.0).data, u, atol=1e-12)

    @pytest.mark.parametrize("expert", EXPERTS)
    def test_long_time_tends_to_mean(self, rng, expert):
        u = rng.normal(size=(8, 8))
        out = hco_apply(u, expert, np.ones((8, 8)), 500.0).data
        np.testing.assert_allclose(out, u.mean(), atol=1e-9)

    def test_dft_output_is_real_for_asymmetric_k(self, rng):
        # an asymmetric map is symmetrised, so the inverse never sees a non-Hermitian spectrum
        u, k = rng.normal(size=(6, 7)), random_k(rng, (6, 7))
        out = hco_apply(u, "dft", k, 1.0)
        assert out.shape == (6, 7) and np.isfinite(out.data).all()

    def test_mirror_frequencies(self):
        k = np.arange(12.0).reshape(3, 4)
        m = mirror_frequencies(Tensor(k)).data
        assert m[0, 0] == k[0, 0] and m[1, 1] == k[2, 3] and m[2, 0] == k[1, 0]


class TestShapes:
    def test_haar_requires_power_of_two(self, rng):
        with pytest.raises(ConfigError):
            hco_apply(rng.normal(size=(6, 6)), "haar", np.ones((6, 6)), 1.0)

    def test_haar_padding(self, rng):
        u = rng.normal(size=(6, 5))
        out = hco_apply(u, "haar", np.zeros((8, 8)), 1.0, pad_haar=True).data
        np.testing.assert_allclose(out, u, atol=1e-12)
        with pytest.raises(ShapeError):
            hco_apply(u, "haar", np.zeros((6, 5)), 1.0, pad_haar=True)

    def test_unknown_expert(self):
        with pytest.raises(ConfigError):
            hco_apply(np.ones((4, 4)), "dst", np.ones((4, 4)), 1.0)

    def test_k_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hco_apply(np.ones((4, 4)), "dct", np.ones((4, 5)), 1.0)

    @pytest.mark.parametrize("expert", EXPERTS)
    def test_window_equals_per_tile_application(self, rng, expert):
        u, k = rng.normal(size=(2, 8, 12)), random_k(rng, (4, 4))
        out = hco_apply(u, expert, k, 0.8, window=4).data
        for i in range(0, 8, 4):
            for j in range(0, 12, 4):
                tile = hco_apply(u[:, i:i + 4, j:j + 4], expert, k, 0.8).data
                np.testing.assert_allclose(out[:, i:i + 4, j:j + 4], tile, atol=1e-12)

    def test_window_must_tile(self):
        with pytest.raises(ConfigError):
            hco_apply(np.ones((6, 6)), "dct", np.ones((4, 4)), 1.0, window=4)


class TestOracle:
    @pytest.mark.parametrize("expert,boundary", [("dct", "neumann"), ("dft", "periodic")])
    @pytest.mark.parametrize("k", [0.1, 1.0])
    def test_agreement_converges(self, rng, expert, boundary, k):
        u = rng.uniform(size=(16, 16))
        spectral = hco_apply(u, expert, np.full((16, 16), k), 1.0).data
        errs = [np.linalg.norm(pde_oracle_solve(OracleGrid(u, boundary, dx=1.0 / r), k, 1.0) - spectral)
                / np.linalg.norm(spectral) for r in REFINEMENTS]
        assert all(a > b for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-2

    def test_mass_conservation(self, rng):
        u = rng.uniform(size=(8, 8))
        for boundary in ("neumann", "periodic"):
            v = pde_oracle_solve(OracleGrid(u, boundary, dx=0.5), 0.5, 1.0)
            assert v.sum() == pytest.approx(u.sum(), rel=1e-12)

    def test_zero_time_returns_input(self, rng):
        u = rng.uniform(size=(8, 8))
        np.testing.assert_allclose(pde_oracle_solve(OracleGrid(u), 1.0, 0.0), u, atol=1e-12)

    def test_unstable_step_rejected(self):
        with pytest.raises(ConfigError, match="stability"):
            pde_oracle_solve(OracleGrid(np.ones((4, 4)), dt_fd=1.0), 1.0, 1.0)

    def test_stable_dt(self):
        assert stable_dt(0.5, 1.0) == pytest.approx(0.0625)
        assert stable_dt(1.0, 0.0) == np.inf

    @pytest.mark.parametrize("kwargs", [{"u": np.ones(4)}, {"u": np.ones((4, 4)), "boundary": "dirichlet"},
                                        {"u": np.ones((4, 4)), "dx": 0.3}])
    def test_bad_grids(self, kwargs):
        with pytest.raises(ConfigError):
            OracleGrid(**kwargs)


class TestDiffusivity:
    def test_predicted_is_nonnegative_and_shaped(self, rng):
        fes = FrequencyEmbedding(4, 5, 6, rng)
        pred = DiffusivityPredictor(4, HCOConfig(), rng)
        k = pred(fes, (5, 6))
        assert k.shape == (5, 6) and np.all(k.data >= 0)

    def test_predicted_shape_mismatch(self, rng):
        pred = DiffusivityPredictor(4, HCOConfig(), rng)
        with pytest.raises(ShapeError):
            pred(FrequencyEmbedding(4, 5, 6, rng), (6, 6))
        with pytest.raises(ConfigError):
            pred(None, (5, 6))

    @pytest.mark.parametrize("mode", ["fixed", "learnable_scalar"])
    def test_scalar_modes_start_at_default(self, rng, mode):
        k = DiffusivityPredictor(4, HCOConfig(k_mode=mode), rng)(None, (3, 3)).data
        np.testing.assert_allclose(k, np.log(2.0), rtol=1e-12)

    def test_fixed_mode_has_no_parameters(self, rng):
        assert not DiffusivityPredictor(4, HCOConfig(k_mode="fixed"), rng).named_parameters()

    def test_projection_formula(self, rng):
        fes = rng.normal(size=(3, 4, 4))
        w, b = rng.normal(size=(3, 1)), rng.normal(size=1)
        expected = np.log1p(np.exp(np.einsum("chw,c->hw", fes, w[:, 0]) + b[0]))
        np.testing.assert_allclose(predict_diffusivity(fes, Tensor(w), Tensor(b)).data, expected, rtol=1e-12)

    @pytest.mark.parametrize("kwargs", [{"t": 0.0}, {"k_mode": "random"}, {"k_value": -0.1}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            HCOConfig(**kwargs)


class TestGradients:
    @pytest.mark.parametrize("expert", EXPERTS)
    @pytest.mark.parametrize("window", [None, 4])
    def test_gradients_wrt_field_and_k(self, rng, expert, window):
        kshape = (4, 4) if window else (8, 8)
        u = Tensor(rng.normal(size=(8, 8)))
        k = Tensor(random_k(rng, kshape))
        report = grad_check(lambda a, b: hco_apply(a, expert, b, 0.7, window=window), [u, k], name=expert)
        assert report.passed, report.line()

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wildscalar.config import GridSpec
from wildscalar.errors import ShapeMismatch, SingularSupport
from wildscalar.symbols import RegularPatch, builtin
from wildscalar.torus_field import (
    StateField,
    apply_multiplier,
    constant,
    cone_mask,
    divergence,
    divergence_residual,
    gradient,
    multiplier_table,
    state_from_constant,
    support_cone_check,
    time_derivative,
    to_spectral,
    wavenumbers,
    zeros,
)


@pytest.fixture
def small_grid():
    return GridSpec(n=2, N_x=16, N_t=8, T=8.0)


def _cosine(grid, k, amplitude=1.0):
    x1, x2 = grid.coordinates()
    values = amplitude * np.cos(k[0] * x1 + k[1] * x2)
    return np.broadcast_to(values, (grid.N_t,) + grid.spatial_shape).copy()


class TestSpectralField:
    def test_forward_normalization(self, small_grid):
        field = to_spectral(small_grid, _cosine(small_grid, (1, 0)))
        assert field.coefficients[0, 0, 1, 0] == pytest.approx(0.5)
        assert field.coefficients[0, 0, -1, 0] == pytest.approx(0.5)
        assert constant(small_grid, [3.0]).coefficients[2, 0, 0, 0] == 3.0

    def test_lossless_round_trip(self, small_grid):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((small_grid.N_t, 2) + small_grid.spatial_shape)
        field = to_spectral(small_grid, values)
        field._physical = None
        np.testing.assert_allclose(field.physical(), values, atol=1e-12)

    def test_shape_mismatch(self, small_grid):
        with pytest.raises(ShapeMismatch):
            to_spectral(small_grid, np.zeros((small_grid.N_t, 3, 3)))

    def test_energy_by_parseval(self, small_grid):
        field = to_spectral(small_grid, _cosine(small_grid, (2, 1), amplitude=2.0))
        # ∫cos² over 𝕋² is 2π², times T and amplitude²
        assert field.energy() == pytest.approx(4.0 * 2 * math.pi ** 2 * small_grid.T)

    def test_arithmetic_on_different_grids(self, small_grid):
        with pytest.raises(ShapeMismatch):
            zeros(small_grid) + zeros(GridSpec(n=2, N_x=8, N_t=8, T=8.0))


class TestOperators:
    def test_wavenumbers_include_negative_modes(self, small_grid):
        k = wavenumbers(small_grid)
        assert k.shape == (2, 16, 16)
        assert k[0, -1, 0] == -1
        assert k[0, 8, 0] == -8

    def test_gradient_of_cosine(self, small_grid):
        field = to_spectral(small_grid, _cosine(small_grid, (1, 2)))
        x1, x2 = small_grid.coordinates()
        grad = gradient(field).physical()
        np.testing.assert_allclose(grad[0, 0], -np.sin(x1 + 2 * x2), atol=1e-12)
        np.testing.assert_allclose(grad[0, 1], -2 * np.sin(x1 + 2 * x2), atol=1e-12)

    def test_divergence_of_curl_vanishes(self, small_grid):
        x1, x2 = small_grid.coordinates()
        values = np.stack([np.cos(2 * x1 + x2), -2 * np.cos(2 * x1 + x2)])  # (∂₂ψ, −∂₁ψ)
        field = to_spectral(small_grid, np.broadcast_to(values, (small_grid.N_t, 2) + small_grid.spatial_shape))
        assert np.abs(divergence(field).physical()).max() < 1e-12

    @pytest.mark.parametrize("scheme", ["fd4", "spectral"])
    def test_time_derivative_of_sine(self, scheme):
        n_t, period = 64, 2 * math.pi
        dt = period / n_t
        t = dt * (np.arange(n_t) + 0.5)
        derivative = time_derivative(np.sin(t), dt, scheme)
        np.testing.assert_allclose(derivative, np.cos(t), atol=1e-4)

    def test_time_derivative_scheme_name(self):
        with pytest.raises(ValueError, match="scheme"):
            time_derivative(np.zeros(8), 0.1, "euler")


class TestMultiplier:
    def test_multiplier_matches_symbol(self, small_grid, pm2d):
        theta = to_spectral(small_grid, _cosine(small_grid, (1, 1)))
        u = apply_multiplier(theta, pm2d).physical()
        m = pm2d(np.array([1.0, 1.0]))
        np.testing.assert_allclose(u[0, 0], m[0] * theta.physical()[0, 0], atol=1e-12)
        np.testing.assert_allclose(u[0, 1], m[1] * theta.physical()[0, 0], atol=1e-12)

    def test_u_is_divergence_free(self, small_grid, pm2d):
        rng = np.random.default_rng(1)
        theta = to_spectral(small_grid, rng.standard_normal((small_grid.N_t,) + small_grid.spatial_shape))
        assert np.abs(divergence(apply_multiplier(theta, pm2d)).physical()).max() < 1e-12

    def test_zero_mode_maps_to_zero(self, small_grid, pm2d):
        table, singular = multiplier_table(pm2d, small_grid)
        assert np.all(table[:, 0, 0] == 0)
        assert not singular.any()

    def test_singular_support_rejected(self):
        grid = GridSpec(n=3, N_x=8, N_t=4, T=4.0)
        x1 = grid.coordinates()[0]
        theta = to_spectral(grid, np.broadcast_to(np.cos(x1), (grid.N_t,) + grid.spatial_shape))
        with pytest.raises(SingularSupport):
            apply_multiplier(theta, builtin("mg"))


class TestCones:
    def test_cone_mask_symmetric(self, small_grid):
        mask = cone_mask(small_grid, [RegularPatch((1.0, 0.0), 0.2)])
        k = wavenumbers(small_grid)
        assert mask[1, 0] and mask[-1, 0]
        assert not mask[0, 1]
        assert not mask[0, 0]
        assert not np.any(mask & (np.abs(k[0]) == 8))

    def test_support_cone_check(self, small_grid):
        patch = RegularPatch((1.0, 0.0), 0.2)
        inside = to_spectral(small_grid, _cosine(small_grid, (3, 0)))
        outside = to_spectral(small_grid, _cosine(small_grid, (0, 3)))
        assert support_cone_check(inside, [patch]) == pytest.approx(1.0)
        assert support_cone_check(outside, [patch]) == pytest.approx(0.0)
        assert support_cone_check(zeros(small_grid), [patch]) == 1.0


class TestStateField:
    def test_constant_state(self, small_grid, pm2d):
        state = state_from_constant(small_grid, [0.0, 0.0, -1 / 3, 0.0, 0.0], pm2d)
        assert isinstance(state, StateField)
        np.testing.assert_allclose(state.stacked()[:, 2], -1 / 3)
        assert state.multiplier_defect() == 0.0
        assert divergence_residual(state) == 0.0
        assert state.energy() == pytest.approx((1 / 9) * small_grid.T * (2 * math.pi) ** 2)

    @given(c=st.floats(min_value=1e-6, max_value=3), sign=st.sampled_from([-1.0, 1.0]))
    @settings(max_examples=20, deadline=None)
    def test_relaxed_rows_hold_for_multiplier_states(self, c, sign):
        c = sign * c
        grid = GridSpec(n=2, N_x=8, N_t=8, T=8.0)
        pm2d = builtin("pm2d")
        x1, x2 = grid.coordinates()
        theta = to_spectral(grid, np.broadcast_to(c * np.cos(x1 + x2), (grid.N_t,) + grid.spatial_shape))
        state = StateField(theta, zeros(grid, 2), apply_multiplier(theta, pm2d), pm2d)
        assert state.multiplier_defect() < 1e-14
        assert divergence_residual(state) < 1e-10


class TestMultiplierAgainstDirectSum:
    @pytest.fixture
    def cube(self):
        return GridSpec(n=3, N_x=8, N_t=2, T=2.0)

    def test_matches_direct_dft(self, cube):
        pm3d = builtin("pm3d")
        values = np.random.default_rng(3).standard_normal((cube.N_t,) + cube.spatial_shape)
        u = apply_multiplier(to_spectral(cube, values), pm3d).physical()
        x = np.stack([c.ravel() for c in cube.coordinates()], axis=1)
        # every mode except k = 0 and the Nyquist planes
        modes = np.array([k for k in itertools.product(range(-3, 4), repeat=3) if any(k)], dtype=float)
        waves = np.exp(1j * x @ modes.T)
        m = np.array([pm3d(k) for k in modes])
        for t in range(cube.N_t):
            theta_hat = waves.conj().T @ values[t].ravel() / len(x)
            expected = (waves @ (m * theta_hat[:, None])).real
            np.testing.assert_allclose(u[t].reshape(3, -1).T, expected, atol=1e-10)

    def test_nyquist_and_mean_are_dropped(self, cube):
        x1, _, _ = cube.coordinates()
        values = np.broadcast_to(2.0 + np.cos(4 * x1), (cube.N_t,) + cube.spatial_shape)
        u = apply_multiplier(to_spectral(cube, values), builtin("pm3d"))
        np.testing.assert_allclose(u.physical(), 0.0, atol=1e-14)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wildscalar.errors import DegenerateTheta, EtaTooLarge, NotInCone, OutsideBall
from wildscalar.geometry import (
    StateMatrix,
    corner_separation,
    decompose,
    dist_to_K,
    distance_to_K,
    eta_admissible,
    find_witness,
    in_K,
    in_lambda_w,
    lambda_w_direction,
    membership_U,
    minimal_steps,
    nearest_K_point,
    openness_fd_check,
    perturbed_arms,
    t4_of,
)

A0_VECTOR = [0.0, 0.0, -1 / 3, 0.0, 0.0]

unit = st.floats(-0.9, 0.9, allow_nan=False)
values = st.floats(-2.0, 2.0, allow_nan=False)


@pytest.fixture(scope="module")
def A0():
    return StateMatrix.from_vector(A0_VECTOR)


@pytest.fixture(scope="module")
def base_t4(A0, pm2d_screens):
    return t4_of(A0, pm2d_screens)


def _grid_search_distance(A, rounds=8, points=41):
    """min over σ and w of |A − (σ, σw, w)|, by nested grids over w."""
    best = np.inf
    for sign in (1.0, -1.0):
        center, half = np.zeros(A.n), 4.0
        for _ in range(rounds):
            axes = [np.linspace(c - half, c + half, points) for c in center]
            w = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, A.n)
            squared = (A.theta - sign) ** 2 + np.sum((A.q - sign * w) ** 2, axis=1) + np.sum((A.u - w) ** 2, axis=1)
            i = int(np.argmin(squared))
            center, half = w[i], half / 8
        best = min(best, float(squared[i]))
    return math.sqrt(best)


class TestConstraintSet:
    def test_distance_of_A0(self, A0):
        assert dist_to_K(A0) == pytest.approx(math.sqrt(1 + 1 / 18))

    def test_vectorized_distance(self):
        points = np.array([[1.0, 0.5, 0.2, 0.5, 0.2], [-1.0, -0.5, 0.0, 0.5, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0]])
        np.testing.assert_allclose(distance_to_K(points, 2), [0.0, 0.0, 1.0])

    @given(theta=values, q1=values, q2=values, u1=values, u2=values)
    @settings(max_examples=50, deadline=None)
    def test_nearest_point_is_in_K(self, theta, q1, q2, u1, u2):
        A = StateMatrix(theta, [q1, q2], [u1, u2])
        assert in_K(nearest_K_point(A))

    @given(theta=values, q1=values, q2=values, u1=values, u2=values)
    @settings(max_examples=30, deadline=None)
    def test_distance_matches_grid_search(self, theta, q1, q2, u1, u2):
        A = StateMatrix(theta, [q1, q2], [u1, u2])
        assert dist_to_K(A) == pytest.approx(_grid_search_distance(A), abs=1e-6)


class TestDecompose:
    @given(theta=unit, q1=values, q2=values, u1=values, u2=values)
    @settings(max_examples=50, deadline=None)
    def test_reconstructs(self, theta, q1, q2, u1, u2):
        A = StateMatrix(theta, [q1, q2], [u1, u2])
        split = decompose(A)
        assert in_K(split.X) and in_K(split.Y)
        np.testing.assert_allclose(split.reconstruct().vector(), A.vector(), atol=1e-9)

    def test_theta_near_one(self):
        with pytest.raises(DegenerateTheta):
            decompose(StateMatrix(1.0, [0.0, 0.0], [0.0, 0.0]))


class TestCone:
    def test_corner_difference_is_a_cone_direction(self, pm2d, pm2d_patches):
        L = StateMatrix(2.0, [0.0, 0.0], [0.0, -2.0])
        assert in_lambda_w(L, pm2d, pm2d_patches)
        xi, patch, residual = lambda_w_direction(L, pm2d, pm2d_patches)
        assert patch == pm2d_patches[0]
        assert residual < 1e-8

    def test_off_circle_is_not(self, pm2d, pm2d_patches):
        assert not in_lambda_w(StateMatrix(1.0, [0.0, 0.0], [0.0, 1.0]), pm2d, pm2d_patches)

    def test_zero_theta_is_not(self, pm2d, pm2d_patches):
        with pytest.raises(NotInCone):
            lambda_w_direction(StateMatrix(0.0, [0.0, -1.0], [0.0, -1.0]), pm2d, pm2d_patches)


class TestScreens:
    def test_anchor_and_radius(self, pm2d_screens, A0):
        np.testing.assert_allclose(pm2d_screens.anchor, [0.0, -2 / 3], atol=1e-12)
        np.testing.assert_allclose(pm2d_screens.q0, [0.0, -1 / 3], atol=1e-12)
        np.testing.assert_allclose(pm2d_screens.A0.vector(), A0.vector(), atol=1e-12)
        assert 0 < pm2d_screens.delta <= pm2d_screens.delta0 / 4
        assert pm2d_screens.transversality_angle >= pm2d_screens.angle_floor


class TestT4:
    def test_corners_of_A0(self, base_t4):
        expected = [[1, 0, -1, 0, -1], [1, 0, 0, 0, 0], [-1, 0, -1, 0, 1], [-1, 0, 0, 0, 0]]
        for corner, vector in zip(base_t4.corners, expected):
            np.testing.assert_allclose(corner.vector(), vector, atol=1e-8)
            assert in_K(corner, tol=1e-8)
        np.testing.assert_allclose(base_t4.weights, [1 / 6, 1 / 3, 1 / 6, 1 / 3], atol=1e-8)
        assert base_t4.mu == pytest.approx(1 / 3)
        assert base_t4.residual < 1e-10
        np.testing.assert_allclose(base_t4.lstsq_weights @ np.ones(4), 1.0)

    def test_frequencies(self, base_t4):
        expected = [(1.0, 0.0), (0.0, 1.0), (1.0, 0.0), (0.0, 1.0)]
        for xi, e in zip(base_t4.frequencies, expected):
            np.testing.assert_allclose(np.abs(xi), e, atol=1e-7)

    def test_nearby_state_reconstructs(self, pm2d_screens, A0):
        A = A0 + StateMatrix(0.3, [0.2, -0.1], [0.1, 0.4]) * (pm2d_screens.delta / 2)
        cfg = t4_of(A, pm2d_screens)
        assert cfg.residual < 1e-9
        assert np.all((cfg.weights > 0) & (cfg.weights < 1))

    def test_outside_ball(self, pm2d_screens, A0):
        A = A0 + StateMatrix(1.0, [0.0, 0.0], [0.0, 0.0]) * (2 * pm2d_screens.delta)
        with pytest.raises(OutsideBall):
            t4_of(A, pm2d_screens)


class TestPerturbedArms:
    def test_arms_return_to_base(self, base_t4, A0):
        cfg = perturbed_arms(base_t4, 0.1, 0.18)
        assert len(cfg.arms) == 5
        np.testing.assert_allclose(cfg.arms[-1].vector(), A0.vector(), atol=1e-9)
        for i, (bar, shrunk) in enumerate(zip(cfg.bars, cfg.shrunk)):
            np.testing.assert_allclose((bar - cfg.arms[i]).vector(), (shrunk - A0).vector(), atol=1e-12)
        assert cfg.separated

    def test_eta_too_large(self, base_t4):
        with pytest.raises(EtaTooLarge):
            perturbed_arms(base_t4, 0.1, 0.3)

    def test_s_range(self, base_t4):
        with pytest.raises(ValueError):
            perturbed_arms(base_t4, 0.3, 0.18)

    @pytest.mark.parametrize("eta,steps", [(0.18, 8), (0.15, 12), (0.1, 12), (0.05, 20)])
    def test_minimal_steps(self, eta, steps):
        assert minimal_steps(eta) == steps

    def test_eta_admissible(self):
        assert eta_admissible(0.2)
        assert not eta_admissible(0.21)


class TestOpenness:
    @pytest.mark.parametrize("sign", [1.0, -1.0])
    @pytest.mark.parametrize("t", [0.3, 0.7])
    @pytest.mark.parametrize("q,u", [
        ([0.01, -0.3], [0.02, 0.0]),
        ([0.01, -0.3, 0.1], [0.02, 0.0, -0.2]),
    ])
    def test_finite_difference_matches_closed_form(self, sign, t, q, u):
        A_prime = StateMatrix(0.05, q, u)
        w = np.linspace(0.2, -0.5, len(q))
        corner = StateMatrix(sign, sign * w, w)
        numeric, closed = openness_fd_check(A_prime, corner, t)
        assert numeric == pytest.approx(closed, rel=1e-6)
        assert closed != 0

    @pytest.mark.parametrize("t", [0.3, 0.7])
    def test_witness_map_is_open(self, pm2d_screens, base_t4, A0, t):
        witness = find_witness(A0 * t + base_t4.corners[0] * (1 - t), pm2d_screens)
        corner = t4_of(witness.A2, pm2d_screens, strict=False).corners[witness.corner]
        numeric, closed = openness_fd_check(witness.A2, corner, witness.t)
        assert numeric == pytest.approx(closed, rel=1e-6)
        assert abs(closed) > 1e-3


class TestU:
    @pytest.mark.parametrize("t", [0.3, 0.7])
    def test_witness_on_first_corner(self, pm2d_screens, base_t4, A0, t):
        A = A0 * t + base_t4.corners[0] * (1 - t)
        assert not pm2d_screens.in_ball(A)
        witness = find_witness(A, pm2d_screens)
        assert witness is not None
        assert witness.corner == 0
        assert witness.t == pytest.approx(t, abs=1e-6)
        assert witness.residual <= 1e-9

    def test_membership(self, pm2d_screens, base_t4, A0):
        assert membership_U(A0, pm2d_screens)
        assert membership_U(A0 * 0.3 + base_t4.corners[0] * 0.7, pm2d_screens)
        assert not membership_U(base_t4.corners[0], pm2d_screens)

    def test_corner_separation(self, pm2d_screens):
        smallest, bound = corner_separation(pm2d_screens, trials=20)
        assert bound == pytest.approx(1 - pm2d_screens.delta)
        assert smallest > 0.5

import numpy as np
import pytest

from wildscalar.config import ConstructionParams
from wildscalar.errors import (
    CascadeDegenerate,
    CoverFailure,
    DimensionMismatch,
    MissingPatches,
    NoWitness,
    StageFailure,
    SymbolError,
    WaveError,
)
from wildscalar.geometry import StateMatrix, distance_to_K, t4_of
from wildscalar.integrator import (
    GAIN_FLOOR,
    STAGE_FIELDS,
    CascadeResult,
    StageReport,
    _cluster_labels,
    cascade_once,
    cover_pieces,
    init_state,
    make_patches,
    perturb_stage,
    prepare,
    run,
    stage_checks,
    stage_epsilon,
    working_window,
    write_stage_csv,
)
from wildscalar.symbols import builtin
from wildscalar.torus_field import divergence_residual, state_from_constant


@pytest.fixture(scope="module")
def A0(pm2d_screens):
    return pm2d_screens.A0


@pytest.fixture(scope="module")
def window_piece(small_params, grid):
    return working_window(small_params).mask(grid)


@pytest.fixture(scope="module")
def U0(small_params, pm2d_screens):
    return init_state(small_params, pm2d_screens)


class TestSetup:
    def test_working_window(self, small_params):
        window = working_window(small_params)
        assert (window.t0, window.t1) == (8.0, 56.0)

    def test_init_state_is_A0(self, U0, A0):
        values = U0.stacked()
        np.testing.assert_allclose(values, np.broadcast_to(A0.vector()[None, :, None, None], values.shape),
                                   atol=1e-15)

    def test_prepare_gates_odd_symbols(self, grid):
        with pytest.raises(SymbolError, match="admissibility"):
            prepare(ConstructionParams(grid=grid, symbol="sqg", eta=0.18, steps=8))

    def test_prepare_checks_dimension(self, grid):
        with pytest.raises(DimensionMismatch, match="dimension"):
            prepare(ConstructionParams(grid=grid, symbol="pm3d", eta=0.18, steps=8))

    def test_no_default_patches_for_mg(self):
        with pytest.raises(MissingPatches, match="patch"):
            make_patches(builtin("mg"), ConstructionParams())

    def test_configured_patch_centers(self, pm2d):
        params = ConstructionParams(patch_centers=((2.0, 0.0), (0.0, 3.0)), cone_width=0.1)
        patches = make_patches(pm2d, params)
        assert [p.center for p in patches] == [(1.0, 0.0), (0.0, 1.0)]
        assert all(p.angular_radius == 0.1 for p in patches)
        assert all(p.jacobian_min_singular_value > 0.5 for p in patches)


class TestCover:
    def test_constant_state_is_one_piece(self, U0, small_params, grid, window_piece, A0):
        values = U0.stacked()
        dist = distance_to_K(values, grid.n, axis=1)
        rows = working_window(small_params).time_mask(grid)
        pieces, total = cover_pieces(values, dist, rows, small_params, grid)
        assert len(pieces) == 1
        assert np.array_equal(pieces[0].mask, window_piece)
        np.testing.assert_allclose(pieces[0].state.vector(), A0.vector(), atol=1e-15)
        assert pieces[0].oscillation < 1e-12
        assert pieces[0].mass == pytest.approx(total)

    def test_two_value_clusters(self):
        points = np.concatenate([np.zeros((10, 5)), np.ones((6, 5))])
        labels = _cluster_labels(points, 2)
        assert len(set(labels[:10])) == 1 and len(set(labels[10:])) == 1
        assert labels[0] != labels[-1]

    def test_mass_not_captured(self, grid):
        # within epsilon1/4 of a mean that already lies in K
        params = ConstructionParams(grid=grid, eta=0.18, steps=8, max_balls=1, epsilon1=0.99)
        values = np.zeros((grid.N_t, 5) + grid.spatial_shape)
        values[:, 0] = 1.0
        values[:, 1, ::2] = 0.2
        values[:, 1, 1::2] = -0.2
        dist = distance_to_K(values, grid.n, axis=1)
        rows = working_window(params).time_mask(grid)
        with pytest.raises(CoverFailure, match="capture"):
            cover_pieces(values, dist, rows, params, grid)

    def test_oscillating_cluster_is_split(self, grid):
        params = ConstructionParams(grid=grid, eta=0.18, steps=8, max_balls=1)
        values = np.zeros((grid.N_t, 5) + grid.spatial_shape)
        values[:, 0] = 1.0
        values[:, 1, ::2] = 0.4
        values[:, 1, 1::2] = -0.4
        dist = distance_to_K(values, grid.n, axis=1)
        rows = working_window(params).time_mask(grid)
        pieces, total = cover_pieces(values, dist, rows, params, grid)
        assert len(pieces) == 2
        assert all(p.oscillation <= params.epsilon1 / 4 for p in pieces)
        assert not np.any(pieces[0].mask & pieces[1].mask)
        assert np.array_equal(pieces[0].mask | pieces[1].mask, working_window(params).mask(grid))
        assert 2 * sum(p.mass for p in pieces) > total

    def test_undecomposable_cluster_stays_out(self, grid, pm2d, pm2d_screens, small_params):
        far = state_from_constant(grid, [0.0, 5.0, 5.0, 5.0, -5.0], pm2d)
        values = far.stacked()
        dist = distance_to_K(values, grid.n, axis=1)
        rows = working_window(small_params).time_mask(grid)
        with pytest.raises(CoverFailure, match="left out"):
            cover_pieces(values, dist, rows, small_params, grid, pm2d_screens)

    def test_witness_travels_with_the_piece(self, grid, pm2d, A0, pm2d_screens, small_params):
        corner = t4_of(A0, pm2d_screens).corners[0]
        A = A0 * 0.7 + corner * 0.3
        values = state_from_constant(grid, A.vector(), pm2d).stacked()
        dist = distance_to_K(values, grid.n, axis=1)
        rows = working_window(small_params).time_mask(grid)
        pieces, _ = cover_pieces(values, dist, rows, small_params, grid, pm2d_screens)
        assert len(pieces) == 1
        assert pieces[0].witness is not None
        assert pieces[0].witness.t == pytest.approx(0.7, abs=1e-6)


class TestCascade:
    def test_t4_cascade_stays_in_window(self, U0, window_piece, A0, pm2d_screens, small_params, grid):
        result = cascade_once(U0, window_piece, A0, pm2d_screens, small_params, strict=False)
        assert result.branch == "t4"
        assert 1 <= result.steps <= small_params.steps
        assert result.witness_t is None
        outside = ~working_window(small_params).time_mask(grid)
        assert np.all(result.z.theta.physical()[outside] == 0.0)
        assert np.all(result.z.u.physical()[outside] == 0.0)
        assert divergence_residual(result.z) <= 1e-8

    def test_epsilon_swamps_arms(self, U0, window_piece, A0, pm2d_screens, grid):
        params = ConstructionParams(grid=grid, eta=0.18, steps=8, epsilon=0.6)
        with pytest.raises(CascadeDegenerate, match="arm separation"):
            cascade_once(U0, window_piece, A0, pm2d_screens, params)

    @pytest.mark.parametrize("t,branch", [(0.3, "shortcut"), (0.7, "extended")])
    def test_witness_branches(self, U0, window_piece, A0, pm2d_screens, small_params, t, branch):
        corner = t4_of(A0, pm2d_screens).corners[0]
        A = A0 * t + corner * (1 - t)
        result = cascade_once(U0, window_piece, A, pm2d_screens, small_params, strict=False)
        assert result.branch == branch
        assert result.witness_t == pytest.approx(t, abs=1e-6)
        if branch == "shortcut":
            assert result.steps == 1
        else:
            assert result.steps >= 2

    def test_state_outside_U(self, U0, window_piece, pm2d_screens, small_params):
        # too far out to be a convex combination of a ball state and its corner
        A = StateMatrix(0.0, [5.0, 5.0], [5.0, -5.0])
        with pytest.raises(NoWitness, match="no decomposition"):
            cascade_once(U0, window_piece, A, pm2d_screens, small_params)

    @pytest.fixture
    def unreachable_corners(self, monkeypatch):
        # dwell checks pass, but no cell can reach half of an enormous distance to K
        monkeypatch.setattr("wildscalar.integrator._fractions", lambda near1, near2, mask: (1.0, 1.0))
        monkeypatch.setattr("wildscalar.integrator.dist_to_K", lambda A: 1e6)

    def test_short_t_fraction_raises(self, unreachable_corners, U0, window_piece, A0, pm2d_screens, small_params):
        with pytest.raises(CascadeDegenerate, match="T-fraction"):
            cascade_once(U0, window_piece, A0, pm2d_screens, small_params, strict=True)

    def test_short_t_fraction_is_flagged(self, unreachable_corners, U0, window_piece, A0, pm2d_screens,
                                         small_params):
        result = cascade_once(U0, window_piece, A0, pm2d_screens, small_params, strict=False)
        assert result.t_fraction == 0.0
        assert result.degenerate

    def test_strict_cascade_meets_t_fraction(self, U0, window_piece, A0, pm2d_screens, small_params):
        try:
            result = cascade_once(U0, window_piece, A0, pm2d_screens, small_params, strict=True)
        except CascadeDegenerate as e:
            assert "dwell" in str(e) or "T-fraction" in str(e)
        else:
            assert result.t_fraction >= 0.25 * 0.9
            assert not result.degenerate


class TestStages:
    def test_stage_adds_zero_mean_energy(self, U0, pm2d_screens, small_params):
        outcome = perturb_stage(U0, pm2d_screens, small_params, strict=False)
        assert len(outcome.pieces) == 1
        assert outcome.cascades[0] is not None
        z = outcome.cascades[0].z
        assert outcome.state.energy() - U0.energy() == pytest.approx(z.energy(), rel=1e-8)
        assert outcome.energy_gain == pytest.approx(z.energy(), rel=1e-8)
        assert z.energy() > 0

    def test_stage_in_K_is_skipped(self, grid, pm2d, small_params, pm2d_screens):
        U = state_from_constant(grid, [1.0, 0.0, -1.0, 0.0, -1.0], pm2d)
        outcome = perturb_stage(U, pm2d_screens, small_params)
        assert outcome.pieces == [] and outcome.state is U

    @pytest.fixture
    def flat_cascade(self, monkeypatch, U0):
        zero = U0 - U0

        def cascade(U, piece, A, screens, params, stage=1, localizer=None, witness=None, strict=True):
            return CascadeResult(zero, "t4", 0, [], 1.0, 0.0, 0.0)

        monkeypatch.setattr("wildscalar.integrator.cascade_once", cascade)

    def test_short_gain_raises(self, flat_cascade, U0, pm2d_screens, small_params):
        with pytest.raises(StageFailure, match="energy gain"):
            perturb_stage(U0, pm2d_screens, small_params, strict=True)

    def test_short_gain_is_recorded(self, flat_cascade, U0, pm2d_screens, small_params):
        outcome = perturb_stage(U0, pm2d_screens, small_params, strict=False)
        assert outcome.energy_gain == pytest.approx(0.0, abs=1e-12)
        assert outcome.dist_mass > 0

    @pytest.mark.parametrize("configured,pieces,expected", [
        (0.1, 1, 0.1),
        (0.1, 2, 0.0625),
        (0.1, 0, 0.1),
        (0.01, 8, 0.01),
    ])
    def test_stage_epsilon(self, grid, configured, pieces, expected):
        params = ConstructionParams(grid=grid, eta=0.18, steps=8, epsilon=configured, epsilon1=0.5)
        epsilon = stage_epsilon(params, pieces)
        assert epsilon == pytest.approx(expected)
        assert epsilon < params.epsilon1 / (2 * max(1, pieces))

    @pytest.mark.slow
    def test_run_reports(self, small_params):
        params = small_params.model_copy(update={"strict": False})
        U, reports = run(params, basket_size=4)
        assert [r.stage for r in reports] == [0, 1]
        assert reports[0].energy_gain == 0.0
        assert reports[1].energy_gain > 0
        assert reports[1].balls == 1 and reports[1].cascades == 1
        assert reports[1].mean_dist != reports[0].mean_dist
        assert reports[1].passed == all(ok for _, _, ok in stage_checks(reports[1], reports[0]).values())

    @pytest.mark.slow
    def test_strict_stages_gain_or_stop(self, grid):
        params = ConstructionParams(grid=grid, stages=3, eta=0.18, steps=8, max_balls=2, workers=1)
        assert params.strict
        try:
            _, reports = run(params, basket_size=4)
        except (CascadeDegenerate, StageFailure, CoverFailure, WaveError):
            return
        for previous, report in zip(reports, reports[1:]):
            if report.dist_mass > 0:
                assert report.energy_gain >= GAIN_FLOOR * report.dist_mass
                assert report.degenerate == 0
            assert report.energy >= previous.energy

    def test_stage_csv_ignores_wall_time(self, tmp_path):
        values = dict.fromkeys(STAGE_FIELDS, 0.5)
        values.update(stage=1, balls=2, cascades=2, epsilon_bound_ok=True, degenerate=0, passed=True)
        first = write_stage_csv(tmp_path / "a.csv", [StageReport(**values, wall_time=1.0)])
        second = write_stage_csv(tmp_path / "b.csv", [StageReport(**values, wall_time=9.0)])
        assert first.read_bytes() == second.read_bytes()
        header, row = first.read_text(encoding="utf-8").splitlines()
        assert header.split(",") == list(STAGE_FIELDS)
        assert row.startswith("1,0.5,")
        assert ",2,2,1,0.5" in row
        assert row.endswith(",0.5,0,1")


def _report(stage, **changes):
    values = dict.fromkeys(STAGE_FIELDS, 0.0)
    values.update(stage=stage, balls=1, cascades=1, epsilon_bound_ok=True, degenerate=0, passed=True,
                  epsilon=0.1, dist_mass=1.0, gain_ratio=0.2, mean_dist=0.5, weak_residual=0.3)
    values.update(changes)
    return StageReport(**values)


class TestStageChecks:
    def test_stage_zero_has_no_checks(self):
        assert stage_checks(_report(0), None) == {}

    def test_stage_in_K_has_no_checks(self):
        assert stage_checks(_report(2, dist_mass=0.0), _report(1)) == {}

    def test_first_stage_skips_weak_residual(self):
        checks = stage_checks(_report(1, mean_dist=0.4), _report(0, mean_dist=0.5))
        assert "weak_residual" not in checks
        assert all(ok for _, _, ok in checks.values())

    def test_monotone_stages_pass(self):
        reports = [_report(0, mean_dist=0.6, weak_residual=0.0)]
        for stage, (mean, weak) in enumerate([(0.5, 0.4), (0.4, 0.3), (0.3, 0.2)], start=1):
            reports.append(_report(stage, mean_dist=mean, weak_residual=weak))
        for previous, report in zip(reports, reports[1:]):
            assert all(ok for _, _, ok in stage_checks(report, previous).values())

    @pytest.mark.parametrize("changes,name", [
        ({"gain_ratio": 0.01}, "gain_ratio"),
        ({"mean_dist": 0.7}, "mean_dist"),
        ({"weak_residual": 0.9}, "weak_residual"),
        ({"epsilon_bound_ok": False}, "epsilon_bound"),
        ({"degenerate": 2}, "degenerate"),
    ])
    def test_each_failure_is_named(self, changes, name):
        checks = stage_checks(_report(2, **changes), _report(1, mean_dist=0.6, weak_residual=0.4))
        failed = [key for key, (_, _, ok) in checks.items() if not ok]
        assert failed == [name]

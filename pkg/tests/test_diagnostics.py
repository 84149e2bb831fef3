import csv
import json
import math

import pytest

from wildscalar.torus_field import state_from_constant
from wildscalar.verify.diagnostics import (
    HISTOGRAM_EDGES,
    constraint_report,
    evaluate_checks,
    format_report,
    write_histogram_csv,
    write_report_csv,
    write_report_json,
)


@pytest.fixture(scope="module")
def A0_report(grid, pm2d, pm2d_patches):
    state = state_from_constant(grid, [0.0, 0.0, -1 / 3, 0.0, 0.0], pm2d)
    return constraint_report(state, pm2d_patches, (8.0, 56.0), title="A0")


class TestConstraintReport:
    def test_A0_statistics(self, A0_report):
        stats = A0_report.stats
        assert stats["flux_gap_mean"] == pytest.approx(1 / 3)
        assert stats["theta_abs_mean"] == 0.0
        assert stats["theta_gap_median"] == 1.0
        assert stats["near_one_fraction"] == 0.0
        assert stats["dist_mean"] == pytest.approx(math.sqrt(1 + 1 / 18))
        assert stats["outside_sup"] == 0.0
        assert stats["cone_fraction"] == 1.0

    def test_A0_passes_every_check(self, A0_report):
        assert set(A0_report.checks) == {"finite", "temporal_support", "cone_fraction", "divergence", "multiplier"}
        assert A0_report.passed
        assert A0_report.failures() == []

    def test_checks_skip_missing_inputs(self, grid, pm2d):
        report = constraint_report(state_from_constant(grid, [0.5, 0.0, 0.0, 0.0, 0.0], pm2d))
        assert "temporal_support" not in report.checks
        assert "cone_fraction" not in report.checks
        assert "outside_sup" not in report.stats

    def test_state_in_K_with_constant_velocity(self, grid, pm2d):
        state = state_from_constant(grid, [1.0, 0.2, 0.1, 0.2, 0.1], pm2d)
        report = constraint_report(state)
        assert report.stats["flux_gap_max"] == 0.0
        assert report.stats["dist_max"] == 0.0
        assert report.stats["near_one_fraction"] == 1.0
        # a nonzero mean velocity is not T[θ]
        assert report.failures() == ["multiplier"]

    def test_rules_tolerate_partial_stats(self):
        checks = evaluate_checks({"non_finite": 2})
        assert checks == {"finite": (2.0, 0.0, False)}


class TestRenderers:
    def test_histogram_counts_every_sample(self, A0_report, grid, tmp_path):
        edges, counts = A0_report.histograms["dist_to_K"]
        window_samples = 24 * grid.N_x ** 2
        assert counts.sum() == window_samples
        path = write_histogram_csv(tmp_path / "histogram.csv", A0_report)
        rows = list(csv.reader(path.open(encoding="utf-8")))
        assert rows[0] == ["quantity", "bin_low", "bin_high", "count"]
        assert len(rows) == 1 + sum(len(e) - 1 for e in HISTOGRAM_EDGES.values())

    def test_csv_and_json(self, A0_report, tmp_path):
        rows = list(csv.reader(write_report_csv(tmp_path / "r.csv", A0_report).open(encoding="utf-8")))
        assert rows[0] == ["kind", "name", "value", "tolerance", "pass"]
        assert ["check", "finite", "0", "0", "1"] in rows
        data = json.loads(write_report_json(tmp_path / "r.json", A0_report).read_text(encoding="utf-8"))
        assert data["passed"] is True
        assert data["checks"]["multiplier"]["pass"] is True

    def test_format_report(self, grid, pm2d):
        report = constraint_report(state_from_constant(grid, [1.0, 0.2, 0.1, 0.2, 0.1], pm2d), title="K")
        text = format_report(report)
        assert text.startswith("# K")
        assert "| multiplier |" in text and "NO" in text

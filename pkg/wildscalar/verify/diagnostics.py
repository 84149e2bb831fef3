"""Constraint report of a state field, with table, CSV, JSON and histogram renderers."""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wildscalar.geometry import distance_to_K
from wildscalar.torus_field import divergence_residual, support_cone_check

logger = logging.getLogger("wildscalar")

NEAR_ONE = 0.25
SUPPORT_TOL = 1e-10
CONE_TOL = 1e-6
DIVERGENCE_TOL = 1e-6
MULTIPLIER_TOL = 1e-10
HISTOGRAM_EDGES = {
    "theta_abs": np.linspace(0.0, 2.0, 41),
    "dist_to_K": np.linspace(0.0, 2.0, 41),
}

# Check name → rule over the collected stats, returning (value, tolerance, pass).
# A rule whose inputs were not collected (no window, no patches) is skipped.
CHECK_RULES = {
    "finite": lambda s: (s["non_finite"], 0.0, s["non_finite"] == 0),
    "temporal_support": lambda s: (s["outside_sup"], SUPPORT_TOL, s["outside_sup"] <= SUPPORT_TOL),
    "cone_fraction": lambda s: (s["cone_fraction"], 1 - CONE_TOL, s["cone_fraction"] >= 1 - CONE_TOL),
    "divergence": lambda s: (s["div_residual"], DIVERGENCE_TOL, s["div_residual"] <= DIVERGENCE_TOL),
    "multiplier": lambda s: (s["multiplier_defect"], MULTIPLIER_TOL, s["multiplier_defect"] <= MULTIPLIER_TOL),
}


@dataclass
class DiagnosticsReport:
    title: str
    stats: dict
    checks: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(ok for _, _, ok in self.checks.values())

    def failures(self):
        return [name for name, (_, _, ok) in self.checks.items() if not ok]

    def add_check(self, name, value, tolerance, ok):
        self.checks[name] = (float(value), float(tolerance), bool(ok))

    def as_dict(self):
        return {
            "title": self.title,
            "passed": self.passed,
            "checks": {name: {"value": v, "tolerance": tol, "pass": ok}
                       for name, (v, tol, ok) in self.checks.items()},
            "stats": {name: float(v) for name, v in self.stats.items()},
        }


def evaluate_checks(stats):
    checks = {}
    for name, rule in CHECK_RULES.items():
        try:
            value, tolerance, ok = rule(stats)
        except (KeyError, TypeError):
            continue
        checks[name] = (float(value), float(tolerance), bool(ok))
    return checks


def window_mask(grid, time_window):
    t = grid.t_axis()
    return (t >= time_window[0]) & (t <= time_window[1])


def constraint_report(state, patches=None, time_window=None, title="constraints", scheme="fd4"):
    """Distribution of |θ|, |q − θu| and dist to K, sup norms, temporal support and cone fraction.

    With a time window the statistics cover the window only and the temporal
    support check measures θ and u outside it.
    """
    grid = state.grid
    n = grid.n
    values = state.stacked()
    rows = slice(None) if time_window is None else window_mask(grid, time_window)
    inside = values[rows]
    theta = inside[:, 0]
    q, u = inside[:, 1:n + 1], inside[:, n + 1:]
    theta_abs = np.abs(theta)
    flux_gap = np.linalg.norm(q - theta[:, None] * u, axis=1)
    dist = distance_to_K(inside, n, axis=1)

    stats = {
        "theta_abs_mean": float(theta_abs.mean()),
        "theta_gap_median": float(np.median(np.abs(theta_abs - 1))),
        "near_one_fraction": float(np.mean(np.abs(theta_abs - 1) < NEAR_ONE)),
        "flux_gap_mean": float(flux_gap.mean()),
        "flux_gap_max": float(flux_gap.max()),
        "dist_mean": float(dist.mean()),
        "dist_max": float(dist.max()),
        "dist_l2": float(np.sqrt(np.mean(dist ** 2))),
        "sup_theta": float(np.abs(values[:, 0]).max()),
        "sup_q": float(np.abs(values[:, 1:n + 1]).max()),
        "sup_u": float(np.abs(values[:, n + 1:]).max()),
        "energy": state.energy(),
        "non_finite": int(np.size(values) - np.count_nonzero(np.isfinite(values))),
        "div_residual": divergence_residual(state, scheme),
        "multiplier_defect": state.multiplier_defect(),
    }
    if time_window is not None:
        outside = ~rows
        stats["outside_sup"] = (float(np.abs(np.concatenate([values[outside, :1], values[outside, n + 1:]],
                                                            axis=1)).max())
                                if outside.any() else 0.0)
    if patches:
        stats["cone_fraction"] = support_cone_check([state.theta, state.u], patches)

    report = DiagnosticsReport(title, stats, evaluate_checks(stats))
    for name, sample in (("theta_abs", theta_abs), ("dist_to_K", dist)):
        edges = HISTOGRAM_EDGES[name]
        counts, _ = np.histogram(np.clip(sample, edges[0], edges[-1]), bins=edges)
        report.histograms[name] = (edges, counts)
    logger.info(f"Diagnostics '{title}': {len(report.checks)} checks, "
                f"{len(report.failures())} failed, mean dist {stats['dist_mean']:.4g}")
    return report


# ═══ Renderers ═══

def _fmt(value):
    return f"{value:.12g}"


def format_report(report):
    """Human-readable table of checks followed by the statistics."""
    lines = [f"# {report.title}", "", "| check | value | tolerance | pass |", "|---|---|---|---|"]
    for name, (value, tolerance, ok) in report.checks.items():
        lines.append(f"| {name} | {value:.4g} | {tolerance:.4g} | {'yes' if ok else 'NO'} |")
    lines.append("")
    for name, value in report.stats.items():
        lines.append(f"- {name}: {value:.6g}")
    return "\n".join(lines)


def write_report_csv(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["kind", "name", "value", "tolerance", "pass"])
        for name, (value, tolerance, ok) in report.checks.items():
            writer.writerow(["check", name, _fmt(value), _fmt(tolerance), int(ok)])
        for name, value in report.stats.items():
            writer.writerow(["stat", name, _fmt(value), "", ""])
    return path


def write_report_json(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_histogram_csv(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["quantity", "bin_low", "bin_high", "count"])
        for name, (edges, counts) in report.histograms.items():
            for low, high, count in zip(edges[:-1], edges[1:], counts):
                writer.writerow([name, _fmt(low), _fmt(high), int(count)])
    return path


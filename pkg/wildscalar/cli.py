"""Command-line entry point for the wildscalar sub-commands: symbol-check, wave-build, t4-solve, integrate, verify.

Flags override the optional `--config` file, which overrides the defaults.
Exit codes: 0 when every check passes, 1 on a failed check or a domain
error, 2 on a usage error.
"""
import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
from jinja2 import Environment, FileSystemLoader
from pydantic import ValidationError

from wildscalar import integrator
from wildscalar.config import COMMANDS, CONFIG_KEYS, build_run_config, load_config_file
from wildscalar.errors import UnknownSymbol, UsageError, WildScalarError
from wildscalar.fieldio import read_state, save_screens, write_field
from wildscalar.geometry import (
    StateMatrix,
    corner_separation,
    dist_to_K,
    find_witness,
    openness_fd_check,
    perturbed_arms,
    t4_of,
)
from wildscalar.symbols import builtin, check_admissibility, check_span_condition, find_regular_patches
from wildscalar.verify.diagnostics import (
    DiagnosticsReport,
    constraint_report,
    format_report,
    write_histogram_csv,
    write_report_csv,
    write_report_json,
)
from wildscalar.verify.run_record import params_digest, record_run
from wildscalar.verify.weak_form import build_basket, relaxed_residual, weak_form_residual
from wildscalar.wave_builder import CSV_FIELDS, WaveDirection, build_wave

logger = logging.getLogger("wildscalar")

TEMPLATES_DIR = Path(__file__).parent / "templates"
SUMMARY_TEMPLATE = "summary.txt.j2"
VERBOSITY_LEVELS = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}
RECONSTRUCTION_TOL = 1e-10
WEIGHT_TOL = 1e-8
OPENNESS_RTOL = 1e-5

# flag → (type, help); dests double as config-file keys
FLAGS = {
    "--grid": (str, "grid as NXxNT or NXxNTxN"),
    "--stages": (int, "number of integration stages"),
    "--cone-width": (float, "angular radius of the frequency patches"),
    "--eta": (float, "cascade step size eta, (1-eta)^3 > 1/2"),
    "--steps": (int, "cascade length N, a multiple of 4"),
    "--epsilon": (float, "dwell tolerance epsilon"),
    "--lambda": (float, "wave weight lambda"),
    "--delta0": (float, "initial oscillation scale"),
    "--patches": (str, "two patch centers, '1,0;0,1'"),
    "--workers": (int, "thread count for cascades and the basket"),
    "--input": (str, "input WSF1 state for verify"),
}


# ═══ Argument parsing ═══

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--symbol", "--name", dest="symbol", help="built-in symbol: pm2d, pm3d, mg, sqg")
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed for baskets, ball trials and witness restarts")
    common.add_argument("-v", "--verbosity", type=int, default=0, choices=sorted(VERBOSITY_LEVELS))
    for flag, (kind, text) in FLAGS.items():
        common.add_argument(flag, dest=flag[2:].replace("-", "_"), type=kind, help=text)

    parser = argparse.ArgumentParser(prog="wildscalar",
                                     description="Convex-integration constructions for active scalar equations")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command_parser = sub.add_parser(command, parents=[common])
        if command == "t4-solve":
            command_parser.add_argument("--state", help="state (theta, q..., u...) as comma-separated numbers")
    return parser


def configure_logging(verbosity):
    logging.basicConfig(level=VERBOSITY_LEVELS.get(verbosity, logging.DEBUG),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_config(args):
    """RunConfig from the config file with the explicit flags layered on top."""
    values = load_config_file(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in CONFIG_KEYS and value is not None:
            values[key] = value
    config = build_run_config(args.command, values)
    if args.config:
        config = config.model_copy(update={"config_path": Path(args.config)})
    return config


def parse_state(text, n):
    try:
        parts = [float(c) for c in text.split(",")]
    except ValueError:
        raise UsageError(f"--state must be comma-separated numbers, got {text!r}") from None
    if len(parts) != 2 * n + 1:
        raise UsageError(f"--state needs {2 * n + 1} numbers for n={n}, got {len(parts)}")
    return StateMatrix.from_vector(parts)


# ═══ Sub-commands ═══

def symbol_check(config, args):
    params = config.params
    symbol = builtin(params.symbol)
    admissibility = check_admissibility(symbol)
    report = DiagnosticsReport(f"admissibility of {symbol.name}", {
        "dimension": symbol.dim,
        "samples": admissibility.sample_count,
    })
    report.add_check("even", admissibility.worst_even, admissibility.tol, admissibility.even)
    report.add_check("zero_homogeneous", admissibility.worst_homogeneity, admissibility.tol,
                     admissibility.zero_homogeneous)
    report.add_check("tangent", admissibility.worst_tangent, admissibility.tol, admissibility.tangent)
    if admissibility.admissible:
        if params.patch_centers or symbol.name in integrator.DEFAULT_PATCH_CENTERS:
            patches = integrator.make_patches(symbol, params)
        else:
            patches = find_regular_patches(symbol)[:2]
        span = check_span_condition(symbol, patches)
        report.stats["patches"] = len(patches)
        report.stats["min_singular_value"] = min(p.jacobian_min_singular_value for p in patches)
        report.add_check("span", span.rank, symbol.dim, span.spans)
    out = config.out_dir
    return report, [write_report_csv(out / "symbol_check.csv", report),
                    write_report_json(out / "symbol_check.json", report)]


def wave_build(config, args):
    params = config.params
    setup = integrator.prepare(params)
    screens = setup.screens
    cfg = t4_of(screens.A0, screens, strict=False)
    L = cfg.corners[0] - screens.A0
    direction = WaveDirection(theta0=L.theta, xi0=tuple(cfg.frequencies[0]), q0=tuple(L.q), patch=cfg.patches[0])
    wave, measured = build_wave(direction, integrator.working_window(params), params.lam, params.epsilon,
                                params.delta0, params.grid, setup.symbol, patches=setup.patches,
                                epsilon2=params.epsilon2)
    report = DiagnosticsReport(f"wave at delta={params.delta0:.4g}, k={measured.k}", {
        "lambda": params.lam,
        "delta": params.delta0,
        "profile_order": wave.profile.order,
        "segment_distance_all": measured.segment_distance_all,
        "frozen_symbol_error": measured.frozen_symbol_error,
        "energy": wave.state.energy(),
    })
    for name, (value, bound, ok) in measured.checks.items():
        report.add_check(name, value, bound, ok)

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    table = out / "wave.csv"
    table.write_text(",".join(CSV_FIELDS) + "\n" + measured.csv_row(), encoding="utf-8")
    return report, [write_field(out / "wave.wsf", wave.state), table,
                    write_report_csv(out / "wave_checks.csv", report)]


def _write_states(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["role", "index", "weight", "state"])
        for role, index, weight, state in rows:
            writer.writerow([role, index, f"{weight:.12g}", " ".join(f"{c:.12g}" for c in state.vector())])
    return path


def t4_solve(config, args):
    params = config.params
    setup = integrator.prepare(params)
    screens = setup.screens
    A = parse_state(args.state, params.grid.n) if getattr(args, "state", None) else screens.A0
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    report = DiagnosticsReport(f"T4 split of {A}", {
        "delta0": screens.delta0,
        "delta": screens.delta,
        "transversality_angle": screens.transversality_angle,
        "dist_to_K": dist_to_K(A),
    })
    rows = [("state", 0, 1.0, A)]

    if screens.in_ball(A):
        cfg = perturbed_arms(t4_of(A, screens), params.s, params.eta)
        report.stats["mu"] = cfg.mu
        report.stats["separation"] = cfg.separation
        report.add_check("reconstruction", cfg.residual, RECONSTRUCTION_TOL, cfg.residual <= RECONSTRUCTION_TOL)
        inside = float(min(cfg.weights.min(), 1 - cfg.weights.max()))
        report.add_check("weights_in_unit_interval", inside, 0.0, inside > 0)
        agreement = float(np.abs(cfg.lstsq_weights - cfg.weights).max())
        report.add_check("weights_lstsq", agreement, WEIGHT_TOL, agreement <= WEIGHT_TOL)
        arm_gap = max((cfg.arms[i + 1] - (cfg.arms[i] * (1 - params.eta * w) + cfg.bars[i] * (params.eta * w))).norm()
                      for i, w in enumerate(cfg.weights))
        report.add_check("arm_relation", arm_gap, RECONSTRUCTION_TOL, arm_gap <= RECONSTRUCTION_TOL)
        smallest, bound = corner_separation(screens, seed=params.seed)
        report.add_check("corner_separation", smallest, bound, smallest >= bound)
        rows += [("corner", i + 1, w, T) for i, (w, T) in enumerate(zip(cfg.weights, cfg.corners))]
        rows += [("arm", i, 0.0, a) for i, a in enumerate(cfg.arms)]
        rows += [("bar", i + 1, 0.0, b) for i, b in enumerate(cfg.bars)]
    else:
        witness = find_witness(A, screens, seed=params.seed)
        report.add_check("witness", 0.0 if witness else 1.0, 0.0, witness is not None)
        if witness:
            corner = t4_of(witness.A2, screens, strict=False).corners[witness.corner]
            report.stats["t"] = witness.t
            report.add_check("reconstruction", witness.residual, RECONSTRUCTION_TOL,
                             witness.residual <= RECONSTRUCTION_TOL)
            numeric, closed = openness_fd_check(witness.A2, corner, witness.t)
            gap = abs(numeric - closed)
            report.add_check("openness_determinant", gap, OPENNESS_RTOL * max(1.0, abs(closed)),
                             gap <= OPENNESS_RTOL * max(1.0, abs(closed)))
            rows += [("base", 0, witness.t, witness.A2), ("corner", witness.corner + 1, 1 - witness.t, corner)]

    return report, [_write_states(out / "t4.csv", rows), write_report_csv(out / "t4_checks.csv", report),
                    save_screens(out / "screens.wsf", screens)]


def integrate(config, args):
    params = config.params
    setup = integrator.prepare(params)
    out = config.out_dir

    def progress(stage):
        logger.info(f"Stage {stage.stage}: energy {stage.energy:.6g} (+{stage.energy_gain:.4g}), "
                    f"mean dist {stage.mean_dist:.4g}, {stage.cascades} cascades in {stage.wall_time:.1f}s")

    U, stages = integrator.run(params, callback=progress, setup=setup, basket_size=config.basket_size)
    window = integrator.working_window(params)
    report = constraint_report(U, setup.patches, (window.t0, window.t1), title="integrated state")
    report.stats["weak_residual"] = stages[-1].weak_residual
    report.stats["relaxed_residual"] = stages[-1].relaxed_residual
    failed = sum(not stage.passed for stage in stages)
    report.add_check("stages", failed, 0, failed == 0)
    outputs = [
        write_field(out / "final.wsf", U),
        integrator.write_stage_csv(out / "stages.csv", stages),
        write_report_csv(out / "diagnostics.csv", report),
        write_report_json(out / "diagnostics.json", report),
        write_histogram_csv(out / "histogram.csv", report),
    ]
    return report, outputs, stages


def verify(config, args):
    params = config.params
    if config.input_path is None:
        raise UsageError("verify needs --input FILE")
    symbol = builtin(params.symbol)
    state = read_state(config.input_path, symbol)
    window = integrator.working_window(params)
    patches = integrator.make_patches(symbol, params) if symbol.name in integrator.DEFAULT_PATCH_CENTERS \
        or params.patch_centers else None
    report = constraint_report(state, patches, (window.t0, window.t1), title=f"verify {config.input_path.name}")
    basket = build_basket(state.grid, config.basket_size, config.seed)
    report.stats["weak_residual"] = weak_form_residual(state.theta, state.u, basket=basket, workers=params.workers)
    report.stats["relaxed_residual"] = relaxed_residual(state.theta, state.q, basket=basket, workers=params.workers)
    out = config.out_dir
    return report, [write_report_csv(out / "verify.csv", report), write_report_json(out / "verify.json", report),
                    write_histogram_csv(out / "verify_histogram.csv", report)]


HANDLERS = {
    "symbol-check": symbol_check,
    "wave-build": wave_build,
    "t4-solve": t4_solve,
    "integrate": integrate,
    "verify": verify,
}


# ═══ Summary ═══

def render_summary(config, report, outputs, stages=None):
    env = Environment(loader=FileSystemLoader(str(TEMPLATES_DIR)), keep_trailing_newline=True)
    checks = report.as_dict()["checks"]
    return env.get_template(SUMMARY_TEMPLATE).render(
        command=config.command,
        title=report.title,
        iso_time=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        params=config.params,
        digest=params_digest(config.params),
        passed=report.passed,
        checks=checks,
        stats={name: float(v) for name, v in report.stats.items()},
        stages=stages or [],
        outputs=[str(p) for p in outputs],
    )


def run_command(config, args):
    """Run one sub-command, write summary.txt and the run record; returns pass/fail."""
    result = HANDLERS[config.command](config, args)
    report, outputs = result[0], list(result[1])
    stages = result[2] if len(result) > 2 else None
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "summary.txt"
    summary.write_text(render_summary(config, report, outputs + [summary], stages), encoding="utf-8")
    outputs.append(summary)
    record_run(out, config.command, config.params, report.as_dict()["checks"], outputs,
               {"seed": config.seed, "failures": report.failures()})
    print(format_report(report))
    if not report.passed:
        logger.warning(f"{config.command}: failed checks {', '.join(report.failures())}")
    return report.passed


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.verbosity)
    try:
        config = resolve_config(args)
        return 0 if run_command(config, args) else 1
    except (UsageError, UnknownSymbol, ValidationError) as e:
        print(f"wildscalar {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (WildScalarError, ValueError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        print(f"wildscalar {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

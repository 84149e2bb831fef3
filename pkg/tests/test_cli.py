import csv
import json

import pytest

from wildscalar.cli import build_parser, dispatch, parse_state, resolve_config
from wildscalar.errors import StageFailure, UsageError
from wildscalar.verify.run_record import get_runs


class TestParser:
    def test_flags_layer_over_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("symbol = pm2d\ngrid = 32x32\neta = 0.18\nsteps = 8\n", encoding="utf-8")
        args = build_parser().parse_args(["integrate", "--config", str(path), "--eta", "0.15", "--steps", "12",
                                          "--out", str(tmp_path / "out")])
        config = resolve_config(args)
        assert config.params.eta == 0.15
        assert config.params.steps == 12
        assert config.params.grid.N_x == 32
        assert config.config_path == path

    def test_name_alias(self):
        args = build_parser().parse_args(["symbol-check", "--name", "sqg"])
        assert args.symbol == "sqg"

    def test_parse_state(self):
        assert parse_state("0,0,-0.25,0,0", 2).q.tolist() == [0.0, -0.25]
        with pytest.raises(UsageError, match="5 numbers"):
            parse_state("0,0,0", 2)


class TestExitCodes:
    def test_odd_symbol_fails_its_check(self, tmp_path):
        assert dispatch(["symbol-check", "--name", "sqg", "--out", str(tmp_path)]) == 1
        summary = (tmp_path / "summary.txt").read_text(encoding="utf-8")
        assert "even: false" in summary
        assert "status:    FAIL" in summary
        assert get_runs(tmp_path)[0]["passed"] is False

    def test_pm2d_passes(self, tmp_path):
        assert dispatch(["symbol-check", "--symbol", "pm2d", "--out", str(tmp_path)]) == 0
        data = json.loads((tmp_path / "symbol_check.json").read_text(encoding="utf-8"))
        assert data["checks"]["span"]["pass"] is True

    def test_unknown_flag(self, tmp_path):
        assert dispatch(["integrate", "--bogus", "1", "--out", str(tmp_path)]) == 2

    def test_unknown_symbol(self, tmp_path):
        assert dispatch(["symbol-check", "--symbol", "euler", "--out", str(tmp_path)]) == 2

    def test_invalid_parameter(self, tmp_path):
        assert dispatch(["integrate", "--eta", "0.4", "--out", str(tmp_path)]) == 2

    def test_verify_needs_input(self, tmp_path):
        assert dispatch(["verify", "--out", str(tmp_path)]) == 2

    def test_bad_state(self, tmp_path):
        assert dispatch(["t4-solve", "--grid", "32x32", "--state", "1,2", "--out", str(tmp_path)]) == 2


class TestCommands:
    def test_t4_solve_writes_tables(self, tmp_path):
        dispatch(["t4-solve", "--grid", "32x32", "--out", str(tmp_path)])
        rows = list(csv.reader((tmp_path / "t4.csv").open(encoding="utf-8")))
        assert rows[0] == ["role", "index", "weight", "state"]
        assert [r[0] for r in rows[1:]].count("corner") == 4
        checks = {r[1]: r[4] for r in csv.reader((tmp_path / "t4_checks.csv").open(encoding="utf-8"))
                  if r[0] == "check"}
        assert checks["reconstruction"] == "1"
        assert checks["weights_lstsq"] == "1"
        assert checks["arm_relation"] == "1"
        assert (tmp_path / "screens.wsf").exists()
        assert (tmp_path / "screens.json").exists()

    def test_t4_solve_outside_ball(self, tmp_path):
        # 0.3 A0 + 0.7 T1 for pm2d
        code = dispatch(["t4-solve", "--grid", "32x32", "--state", "0.7,0,-0.8,0,-0.7", "--out", str(tmp_path)])
        assert code == 0
        summary = (tmp_path / "summary.txt").read_text(encoding="utf-8")
        assert "witness: true" in summary
        assert "openness_determinant: true" in summary

    @pytest.mark.slow
    def test_integrate_then_verify(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("# small run\nsymbol = pm2d\ngrid = 32x32\nstages = 1\neta = 0.18\nsteps = 8\n"
                          "strict = false\n", encoding="utf-8")
        out = tmp_path / "run"
        code = dispatch(["integrate", "--config", str(config), "--out", str(out)])
        for name in ("final.wsf", "stages.csv", "diagnostics.csv", "diagnostics.json", "histogram.csv",
                     "summary.txt", "runs.jsonl"):
            assert (out / name).exists()
        stages = list(csv.DictReader((out / "stages.csv").open(encoding="utf-8")))
        assert [row["stage"] for row in stages] == ["0", "1"]
        assert float(stages[1]["energy_gain"]) > 0
        diagnostics = json.loads((out / "diagnostics.json").read_text(encoding="utf-8"))
        assert diagnostics["checks"]["stages"]["pass"] == (stages[1]["passed"] == "1")
        assert code == (0 if diagnostics["passed"] else 1)
        if stages[1]["passed"] == "0":
            assert code == 1

        checked = tmp_path / "verify"
        assert dispatch(["verify", "--input", str(out / "final.wsf"), "--out", str(checked)]) == 0
        assert json.loads((checked / "verify.json").read_text(encoding="utf-8"))["passed"] is True

    def test_failed_stage_exits_nonzero(self, tmp_path, monkeypatch):
        def stop(*args, **kwargs):
            raise StageFailure("Stage 1: energy gain 0 is 0.0000 of the dist^2 mass 1, below 0.05")

        monkeypatch.setattr("wildscalar.integrator.perturb_stage", stop)
        code = dispatch(["integrate", "--grid", "32x32", "--eta", "0.18", "--steps", "8", "--out", str(tmp_path)])
        assert code == 1

    def test_unparsable_state_is_usage_error(self, tmp_path):
        assert dispatch(["t4-solve", "--state", "a,b,c,d,e", "--out", str(tmp_path)]) == 2

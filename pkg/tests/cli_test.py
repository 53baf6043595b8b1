import csv
import json
import logging
import os
import unittest
from tempfile import mkdtemp

import numpy as np
import pytest
from mock import patch

from mpg.cli import main
from mpg.lib import EXIT_FAILURE, EXIT_NOINPUT, EXIT_NON_MPG, EXIT_OK, EXIT_USAGE, SCHEMA_VERSION
from mpg.solver import BaselineResult, SolveResult, fishwar_closed_form

log = logging.getLogger(__name__)

FAST_CHECK = {"num_points": 4, "noise_samples": 8}


class CliTests(unittest.TestCase):
    def setUp(self):
        self.workdir = mkdtemp()
        self.out = os.path.join(self.workdir, "results")

    def config(self, **sections):
        payload = {"check": FAST_CHECK}
        payload.update(sections)
        path = os.path.join(self.workdir, "experiment.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        return path

    def run_cli(self, command, config, *extra):
        return main([command, "--config", config, "--out", self.out, *extra])

    def load(self, name):
        with open(os.path.join(self.out, name), encoding="utf-8") as fh:
            return json.load(fh)

    def test_check_fishwar(self):
        self.assertEqual(self.run_cli("check", self.config()), EXIT_OK)
        report = self.load("mpg_report.json")
        self.assertEqual(report["verdict"], "MPG")
        self.assertEqual(report["schema_version"], SCHEMA_VERSION)
        self.assertEqual(report["command"], "check")
        self.assertEqual(len(report["config_hash"]), 64)

    def test_check_counterexample(self):
        config = self.config(environment={"name": "counterexample"})
        self.assertEqual(self.run_cli("check", config), EXIT_NON_MPG)
        self.assertEqual(self.load("mpg_report.json")["verdict"], "non-MPG")

    def test_check_is_byte_identical_across_runs(self):
        config = self.config(environment={"name": "mac"})
        self.run_cli("check", config, "--seed", "5")
        with open(os.path.join(self.out, "mpg_report.json"), "rb") as fh:
            first = fh.read()
        self.run_cli("check", config, "--seed", "5")
        with open(os.path.join(self.out, "mpg_report.json"), "rb") as fh:
            self.assertEqual(fh.read(), first)

    def test_malformed_config(self):
        path = os.path.join(self.workdir, "broken.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("{")
        self.assertEqual(self.run_cli("check", path), EXIT_USAGE)

    def test_unknown_key(self):
        self.assertEqual(self.run_cli("check", self.config(trainer={})), EXIT_USAGE)

    def test_missing_config(self):
        self.assertEqual(self.run_cli("check", os.path.join(self.workdir, "absent.json")), EXIT_NOINPUT)

    def test_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])
        self.assertEqual(excinfo.value.code, EXIT_USAGE)

    def test_solve_refuses_a_non_potential_game(self):
        config = self.config(environment={"name": "counterexample"})
        with patch("mpg.cli.pg_train") as train:
            self.assertEqual(self.run_cli("solve", config), EXIT_NON_MPG)
        train.assert_not_called()

    def test_solve_writes_result_and_curve(self):
        curve = [{"iteration": i, "value": -3.0 + 0.1 * i, "stderr": 0.0, "kl": 0.01} for i in range(1, 4)]
        result = SolveResult(w=np.array([0.35, 0.36]), value=-2.7, stderr=0.0, curve=curve, best_iteration=3)
        with patch("mpg.cli.pg_train", return_value=result) as train:
            self.assertEqual(self.run_cli("solve", self.config()), EXIT_OK)
        train.assert_called_once()
        solved = self.load("solve_result.json")
        self.assertEqual(solved["w"], [0.35, 0.36])
        self.assertEqual(solved["verdict"], "MPG")
        self.assertEqual(solved["constraint_violations"], 0)
        with open(os.path.join(self.out, "curve.csv"), newline="", encoding="utf-8") as fh:
            self.assertEqual(len(list(csv.DictReader(fh))), 3)

    def test_verify_closed_form(self):
        w_file = os.path.join(self.workdir, "w.json")
        with open(w_file, "w", encoding="utf-8") as fh:
            json.dump({"w": fishwar_closed_form(2, 0.5, 0.9).tolist()}, fh)
        config = self.config(verify={"budget": 40, "restarts": 1})
        self.assertEqual(self.run_cli("verify", config, "--w-file", w_file), EXIT_OK)
        report = self.load("nash_report.json")
        assert report["epsilon_relative"] < 1e-3
        self.assertEqual(report["constraint_violations"], 0)
        self.assertEqual(len(report["agents"]), 2)

    def test_verify_without_a_solution(self):
        self.assertEqual(self.run_cli("verify", self.config()), EXIT_NOINPUT)

    def test_bench_needs_mac(self):
        self.assertEqual(self.run_cli("bench-mac", self.config()), EXIT_USAGE)

    def bench(self, trained_value):
        trained = SolveResult(w=np.full(4, 0.05), value=trained_value, stderr=0.1, curve=[])
        baseline = BaselineResult(
            averaged_value=10.0, per_sequence_mean=11.0, per_sequence_stderr=0.2, iterations=50, residual=1e-7
        )
        config = self.config(environment={"name": "mac"})
        with patch("mpg.cli.pg_train", return_value=trained), patch(
            "mpg.cli.deterministic_baseline_mac", return_value=baseline
        ):
            return self.run_cli("bench-mac", config)

    def test_bench_accepts(self):
        self.assertEqual(self.bench(9.8), EXIT_OK)
        report = self.load("bench_mac.json")
        self.assertAlmostEqual(report["ratio"], 0.98)
        assert report["accepted"]
        assert report["per_sequence_bound_holds"]
        self.assertEqual(report["constraint_violations"], 0)

    def test_bench_rejects(self):
        self.assertEqual(self.bench(9.0), EXIT_FAILURE)
        assert not self.load("bench_mac.json")["accepted"]

    def test_potential_fishwar(self):
        self.assertEqual(self.run_cli("potential", self.config(potential={"quadrature": 1024})), EXIT_OK)
        report = self.load("potential_report.json")
        assert report["declared_deviation"] < 1e-5
        assert report["consistency"]["params"] < 1e-6
        with open(os.path.join(self.out, "potential_grid.csv"), newline="", encoding="utf-8") as fh:
            self.assertEqual(len(list(csv.DictReader(fh))), 4)

    def test_bench_flags_a_value_above_the_per_sequence_bound(self):
        with self.assertLogs("mpg.cli", level="WARNING") as logs:
            self.assertEqual(self.bench(12.0), EXIT_OK)
        report = self.load("bench_mac.json")
        assert report["accepted"]
        assert not report["per_sequence_bound_holds"]
        self.assertAlmostEqual(report["per_sequence_bound"], 1.0 + 3.0 * np.hypot(0.1, 0.2) / 11.0)
        assert any("per-sequence baseline" in line for line in logs.output)

    @pytest.mark.slow
    def test_bench_mac_ci_profile(self):
        contrib = os.path.join(os.path.dirname(__file__), "..", "contrib", "mac-ci.json")
        self.assertEqual(main(["bench-mac", "--config", contrib, "--out", self.out]), EXIT_OK)
        assert self.load("bench_mac.json")["ratio"] >= 0.90


class RerunTests(unittest.TestCase):
    """Every command writes the same bytes when rerun with the same configuration."""

    def setUp(self):
        self.workdir = mkdtemp()

    def config(self, **sections):
        payload = {"check": FAST_CHECK}
        payload.update(sections)
        path = os.path.join(self.workdir, "experiment.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        return path

    def twice(self, command, config, names, *extra):
        outputs = []
        for run in ("first", "second"):
            out = os.path.join(self.workdir, run)
            self.assertEqual(main([command, "--config", config, "--out", out, *extra]), EXIT_OK)
            contents = {}
            for name in names:
                with open(os.path.join(out, name), "rb") as fh:
                    contents[name] = fh.read()
            outputs.append(contents)
        return outputs

    def assert_identical(self, outputs):
        first, second = outputs
        for name, content in first.items():
            self.assertEqual(content, second[name], name)

    def test_solve(self):
        config = self.config(
            train={"batch_size": 400, "iterations": 2, "eval_every": 1, "eval_rollouts": 2},
            policy={"exploration_std": 0.01},
        )
        self.assert_identical(self.twice("solve", config, ["solve_result.json", "curve.csv", "mpg_report.json"]))

    def test_verify(self):
        w_file = os.path.join(self.workdir, "w.json")
        with open(w_file, "w", encoding="utf-8") as fh:
            json.dump({"w": fishwar_closed_form(2, 0.5, 0.9).tolist()}, fh)
        config = self.config(verify={"budget": 40, "restarts": 1, "num_rollouts": 4})
        self.assert_identical(self.twice("verify", config, ["nash_report.json"], "--w-file", w_file))

    def test_potential(self):
        config = self.config(potential={"quadrature": 256})
        self.assert_identical(self.twice("potential", config, ["potential_report.json", "potential_grid.csv"]))

    def test_bench_mac(self):
        trained = SolveResult(w=np.full(4, 0.05), value=9.8, stderr=0.1, curve=[])
        baseline = BaselineResult(
            averaged_value=10.0, per_sequence_mean=11.0, per_sequence_stderr=0.2, iterations=50, residual=1e-7
        )
        config = self.config(environment={"name": "mac"})
        with patch("mpg.cli.pg_train", return_value=trained), patch(
            "mpg.cli.deterministic_baseline_mac", return_value=baseline
        ):
            self.assert_identical(self.twice("bench-mac", config, ["bench_mac.json", "curve.csv"]))

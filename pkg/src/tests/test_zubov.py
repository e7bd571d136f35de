import pathlib
import tempfile

import numpy as np
import pytest
from unittest import TestCase

import disk
import net
import zubov
from constants import EXIT_FALSIFIED, EXIT_OK, EXIT_UNKNOWN, EXIT_USAGE
from tests.networks import norm_squared_certificate, zero_policy


class TestCommandLine(TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.directory.name)
        self.weights = self.root / "weights"
        net.save_networks(self.weights, norm_squared_certificate(), zero_policy())

    def tearDown(self):
        self.directory.cleanup()

    def run_command(self, *argv):
        return zubov.main(list(argv) + ["--weights", str(self.weights), "--out", str(self.root / "out")])

    def test_usage_errors(self):
        assert zubov.main([]) == EXIT_USAGE
        assert zubov.main(["bogus"]) == EXIT_USAGE
        assert zubov.main(["verify", "--system", "cart-pole"]) == EXIT_USAGE
        assert zubov.main(["verify", "--weights", str(self.root / "missing")]) == EXIT_USAGE
        assert zubov.main(["verify", "--config", str(self.root / "missing.json")]) == EXIT_USAGE
        assert self.run_command("verify", "--c", "1.5") == EXIT_USAGE

    def test_help(self):
        assert zubov.main(["--help"]) == EXIT_OK

    def test_verify_reports_a_counterexample(self):
        # without control the double integrator drifts, so W = tanh(|x|^2) cannot decrease everywhere
        report = self.root / "report.json"
        assert self.run_command("verify", "--c", "0.5", "--report", str(report)) == EXIT_FALSIFIED
        written = disk.read_json(report)
        assert written["status"] == "falsified"
        assert written["condition"] == "interior"
        assert len(written["counterexample"]) == 2

    def linear_config(self):
        path = self.root / "linear.json"
        disk.write_json({"system": {"name": "linear"}, "train": {"region_scale": 1.0}}, path)
        return ["--config", str(path)]

    def test_verify_certifies_the_decaying_linear_system(self):
        report = self.root / "report.json"
        assert self.run_command("verify", "--c", "0.5", "--report", str(report), *self.linear_config()) == EXIT_OK
        written = disk.read_json(report)
        assert written["status"] == "verified"
        assert written["area_estimate"] > 0

    def test_verify_out_of_budget_is_unknown(self):
        argv = ["verify", "--c", "0.5", "--budget", "1", *self.linear_config()]
        assert self.run_command(*argv) == EXIT_UNKNOWN

    def test_area(self):
        assert self.run_command("area", "--c", str(np.tanh(0.5)), "--samples", "20000") == EXIT_OK
        area = disk.read_json(self.root / "out" / "area.json")
        assert abs(area["area"] - np.pi * 0.5) < 4 * area["stderr"] + 1e-2

    def test_plot_data(self):
        assert self.run_command("plot-data", "--c", "0.5", "--points", "21") == EXIT_OK
        out = self.root / "out"
        for name in ("w_grid.csv", "vector_field.csv", "level_set.csv", "value_grid.csv"):
            assert (out / name).exists()
        assert len(disk.read_frame(out / "w_grid.csv")) == 21 * 21
        assert (out / "trajectories" / "trajectory-000.csv").exists()

    def test_simulate(self):
        assert self.run_command("simulate", "--count", "2") == EXIT_OK
        frame = disk.read_frame(self.root / "out" / "trajectories" / "trajectory-001.csv")
        assert list(frame.columns) == ["t", "x1", "x2"]

    def test_export_smt(self):
        assert self.run_command("export-smt", "--c", "0.5") == EXIT_OK
        files = sorted(p.name for p in (self.root / "out" / "smt").iterdir())
        assert files == ["boundary.smt2", "decrease.smt2", "positivity.smt2"]

    def test_export_lqr_smt(self):
        assert self.run_command("export-smt", "--lqr", "--c", "0.5") == EXIT_OK
        files = sorted(p.name for p in (self.root / "out" / "smt").iterdir())
        assert files == ["lqr-decrease.smt2", "lqr-input.smt2"]

    def test_lqr(self):
        assert self.run_command("lqr") == EXIT_OK
        report = disk.read_json(self.root / "out" / "lqr_report.json")
        assert abs(report["c_lqr"] - 1.0 / np.sqrt(3.0)) < 2e-3

    def test_overrides(self):
        args = zubov.build_parser().parse_args(["verify", "--c", "0.3", "--epsilon", "0.05", "--seed", "4"])
        assert zubov.overrides_from(args) == {"seed": 4, "verify": {"c": 0.3, "epsilon": 0.05}}


@pytest.mark.slow
class TestTrainCommand(TestCase):
    def test_train_then_verify(self):
        with tempfile.TemporaryDirectory() as directory:
            root = pathlib.Path(directory)
            common = ["--weights", str(root / "weights"), "--out", str(root)]
            assert zubov.main(["train", "--iterations", "20"] + common) == EXIT_OK
            assert (root / "history.csv").exists()
            assert zubov.main(["verify", "--c", "0.05", "--report", str(root / "report.json")] + common) in (0, 3, 4)

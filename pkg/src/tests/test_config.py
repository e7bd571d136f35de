import json
import pathlib
import tempfile

import numpy as np
from unittest import TestCase

from config import ConfigError, LossMode, load_run_config, merge
from constants import SYSTEM_DEFAULTS


class TestConfig(TestCase):
    def test_template_defaults(self):
        run = load_run_config()
        assert run.system == "double-integrator"
        assert run.train.alpha == SYSTEM_DEFAULTS["double-integrator"]["alpha"]
        assert run.train.certificate_dims == (2, 20, 20, 1)
        assert run.train.loss_mode == LossMode.ZUBOV
        assert run.verify.c is None
        assert run.verify.epsilon == 0.1
        assert run.reference_c == 0.7

    def test_r2_is_the_scaled_training_box(self):
        run = load_run_config()
        assert run.train.r2.to_bounds() == [[-2.25, 2.25], [-2.25, 2.25]]
        assert np.isclose(run.verify.resolved_delta_min(run.train.r2), 1e-4 * run.train.r2.diameter())

    def test_system_defaults_follow_the_system(self):
        run = load_run_config(overrides={"system": {"name": "van-der-pol"}})
        assert run.train.alpha == 0.1
        assert run.train.policy_dims == (2, 30, 30, 1)

    def test_overrides_win(self):
        run = load_run_config(overrides={"train": {"alpha": 0.3, "iterations": 7}, "verify": {"c": 0.4}, "seed": 9})
        assert run.train.alpha == 0.3
        assert run.train.iterations == 7
        assert run.verify.c == 0.4
        assert run.seed == 9 and run.train.seed == 9

    def test_user_file(self):
        with tempfile.TemporaryDirectory() as directory:
            path = pathlib.Path(directory) / "run.json"
            path.write_text(json.dumps({"system": {"name": "inverted-pendulum", "params": {"m": 0.2}}}))
            run = load_run_config(path)
        assert run.system == "inverted-pendulum"
        assert run.params == {"m": 0.2}

    def test_unknown_keys_rejected(self):
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"train": {"learning_rat": 0.1}})
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"system": {"name": "cart-pole"}})

    def test_out_of_range_values_rejected(self):
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"verify": {"c": 1.5}})
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"train": {"r1": [[0.0, 1.0], [-1.0, 1.0]]}})
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"train": {"loss_mode": "hinge"}})

    def test_invalid_json(self):
        with tempfile.TemporaryDirectory() as directory:
            path = pathlib.Path(directory) / "broken.json"
            path.write_text("{")
            with self.assertRaises(ConfigError):
                load_run_config(path)

    def test_merge_keeps_open_sections(self):
        merged = merge({"params": {"a": 1}, "x": {"y": 1}}, {"params": {"b": 2}, "x": {"y": 3}})
        assert merged == {"params": {"b": 2}, "x": {"y": 3}}

#!/usr/bin/env python3
"""Unit tests for run configuration loading."""

import shutil
import tempfile
import unittest
from pathlib import Path

from depthsynth.config import RUN_FILE, RunConfigLoader, load_run_config
from depthsynth.data import SceneConfig, generate_dataset
from depthsynth.errors import ConfigError
from depthsynth.geometry import AdjustmentParams, CameraRig


class TestRunConfig(unittest.TestCase):
    """Test merging, validation and the domain builders."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.dir = Path(self.temp_dir)

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def write(self, text, name="run.yaml"):
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_defaults(self):
        config = load_run_config()
        self.assertEqual(config["p"], 1.5)
        self.assertEqual(config["alpha_z"], 1.0)
        self.assertEqual(config["alpha_p"], 1.0)
        self.assertEqual(config["size"], 64)
        self.assertEqual(config.model().dilation_set, (1, 2, 3, 4))
        self.assertEqual(config.rig(), CameraRig.create(64.0, 0.1, 10.0))

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as raised:
            load_run_config(overrides={"colour": "red"})
        self.assertIn("colour", str(raised.exception))

    def test_flags_override_file(self):
        path = self.write("size: 32\nlr: 0.01\nmode: disparity\n")
        config = load_run_config(path, {"size": 16, "lr": None})
        self.assertEqual(config["size"], 16)
        self.assertEqual(config["lr"], 0.01)
        self.assertEqual(config["mode"], "disparity")
        self.assertEqual(config.model().output_mode, "disparity")

    def test_every_problem_is_reported(self):
        with self.assertRaises(ConfigError) as raised:
            load_run_config(overrides={"z_near": 3.0, "z_far": 2.0, "size": 60})
        message = str(raised.exception)
        self.assertIn("z_near", message)
        self.assertIn("not divisible", message)

    def test_range_outside_rig(self):
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"z_far": 12.0})

    def test_non_power_of_two_downscale(self):
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"downscale": 6, "size": 60})

    def test_both_weights_zero(self):
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"alpha_z": 0.0, "alpha_p": 0.0})

    def test_exponent_bounds(self):
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"p": 0.5})
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"p": "often"})

    def test_fitted_exponent(self):
        config = load_run_config(overrides={"p": "auto"})
        rig = config.rig()
        samples = generate_dataset(2, SceneConfig(height=16, width=16, near_heavy=True), rig)
        params = config.adjustment(samples, rig)
        self.assertIsInstance(params, AdjustmentParams)
        self.assertTrue(1.0 <= params.p <= 4.0)
        with self.assertRaises(ConfigError):
            config.adjustment()

    def test_fixed_exponent(self):
        self.assertEqual(load_run_config(overrides={"p": 2}).adjustment(), AdjustmentParams(2.0))

    def test_run_file_reproduces_config(self):
        config = load_run_config(overrides={"seed": 3, "dilations": [1, 3], "checkpoint": None})
        path = config.write(self.dir / "out")
        self.assertEqual(path.name, RUN_FILE)
        self.assertEqual(load_run_config(path).values, config.values)

    def test_shipped_configs_resolve(self):
        shipped = Path(__file__).parent / "config"
        for name in ("default.yaml", "overfit.yaml", "ablation.yaml"):
            load_run_config(shipped / name)
        self.assertEqual(load_run_config(shipped / "default.yaml").values, load_run_config().values)

    def test_train_settings(self):
        config = load_run_config(overrides={"iterations": 7, "batch": 2, "projection": False, "alpha_p": 0.0})
        train = config.train(AdjustmentParams(1.5), out_dir=self.dir)
        self.assertEqual(train.iterations, 7)
        self.assertEqual(train.batch_size, 2)
        self.assertFalse(train.loss.enable_projection)
        self.assertEqual(train.checkpoint_path, str(self.dir / "model.ckpt"))
        self.assertEqual(train.history_path, str(self.dir / "history.jsonl"))


class TestRunConfigLoader(unittest.TestCase):
    """Test problem collection in the loader."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.loader = RunConfigLoader()

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def test_yaml_syntax_error(self):
        path = Path(self.temp_dir) / "broken.yaml"
        path.write_text("size: [16\n", encoding="utf-8")
        self.assertIsNone(self.loader.resolve(path))
        self.assertTrue(any("YAML syntax error" in error for error in self.loader.errors))

    def test_missing_file(self):
        self.assertIsNone(self.loader.resolve(Path(self.temp_dir) / "absent.yaml"))
        self.assertTrue(any("not found" in error for error in self.loader.errors))

    def test_not_a_mapping(self):
        path = Path(self.temp_dir) / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        self.assertIsNone(self.loader.resolve(path))
        self.assertEqual(len(self.loader.errors), 1)

    def test_empty_file_warns(self):
        path = Path(self.temp_dir) / "empty.yaml"
        path.write_text("", encoding="utf-8")
        self.assertIsNotNone(self.loader.resolve(path))
        self.assertEqual(len(self.loader.warnings), 1)

    def test_ignored_projection_weight_warns(self):
        config = self.loader.resolve(overrides={"projection": False})
        self.assertIsNotNone(config)
        self.assertTrue(any("alpha_p" in warning for warning in self.loader.warnings))


if __name__ == "__main__":
    unittest.main()

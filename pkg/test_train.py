#!/usr/bin/env python3
"""Unit tests for Adam, the training loop and checkpoints."""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from depthsynth.data import SceneConfig, generate_dataset
from depthsynth.errors import (
    ConfigError,
    ContractError,
    DegenerateProjectionError,
    FormatError,
    ShapeError,
    TrainingAbortedError,
)
from depthsynth.geometry import CameraRig
from depthsynth.loss import LossConfig
from depthsynth.metrics import EvalReport
from depthsynth.model import ModelConfig, build_model, predict
from depthsynth.tensor import Tensor
from depthsynth.train import (
    CHECKPOINT_MAGIC,
    AdamState,
    TrainConfig,
    TrainHistory,
    adam_step,
    batch_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)

SMALL = ModelConfig(base_channels=4, growth=4, decoder_channels=8, precision="float64")
RIG = CameraRig.create(64.0, 0.1, 10.0)


def small_dataset(count=4, seed=0):
    return generate_dataset(count, SceneConfig(seed=seed, height=16, width=16, layer_count=1), RIG)


class TestAdam(unittest.TestCase):
    """Test the optimizer step."""

    def test_zero_gradient(self):
        param = Tensor(np.full((1, 1, 1, 2), 3.0), requires_grad=True, name="w")
        state = AdamState.create({"w": param})
        adam_step({"w": param}, {"w": np.zeros((1, 1, 1, 2))}, state)
        np.testing.assert_array_equal(param.data, 3.0)
        self.assertEqual(state.step, 1)

    def test_first_step(self):
        param = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True, name="w")
        state = AdamState.create({"w": param}, lr=0.01)
        adam_step({"w": param}, {"w": np.full((1, 1, 1, 1), 0.5)}, state)
        self.assertAlmostEqual(param.item(), -0.01 * 0.5 / (0.5 + 1e-8), places=12)

    def test_independent_parameters(self):
        params = {
            "a": Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, name="a"),
            "b": Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, name="b"),
        }
        state = AdamState.create(params)
        grad = np.random.default_rng(0).normal(size=(1, 1, 2, 2))
        for _ in range(3):
            adam_step(params, {"a": grad, "b": grad}, state)
        np.testing.assert_array_equal(params["a"].data, params["b"].data)

    def test_shape_mismatch(self):
        param = Tensor(np.zeros((1, 1, 1, 2)), requires_grad=True, name="w")
        with self.assertRaises(ContractError):
            adam_step({"w": param}, {"w": np.zeros((1, 1, 1, 3))}, AdamState.create({"w": param}))

    def test_linear_toy_model_descends(self):
        """Small steps on a one-parameter least-squares fit never raise the loss."""
        x = np.linspace(0.1, 1.0, 10).reshape(1, 1, 1, 10)
        y = 2.0 * x
        weight = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True, name="w")
        state = AdamState.create({"w": weight}, lr=1e-3)
        losses = []
        for _ in range(100):
            residual = weight.item() * x - y
            losses.append(float(np.mean(residual**2)))
            grad = np.sum(2.0 * residual * x) / x.size
            adam_step({"w": weight}, {"w": np.full((1, 1, 1, 1), grad)}, state)
        self.assertTrue(all(later <= earlier for earlier, later in zip(losses, losses[1:])))


class TestHistory(unittest.TestCase):
    """Test training history bookkeeping."""

    def test_strictly_increasing(self):
        history = TrainHistory()
        history.append({"iteration": 1})
        history.append({"iteration": 5})
        with self.assertRaises(ContractError):
            history.append({"iteration": 5})
        self.assertEqual(history.last, {"iteration": 5})
        lines = history.to_jsonl().splitlines()
        self.assertEqual([json.loads(line)["iteration"] for line in lines], [1, 5])

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            TrainConfig(iterations=0)
        with self.assertRaises(ConfigError):
            TrainConfig(lr=-1.0)
        with self.assertRaises(ConfigError):
            TrainConfig(beta1=1.0)


class TestTrainLoop(unittest.TestCase):
    """Test the training loop on tiny scenes."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.out = Path(self.temp_dir)
        self.samples = small_dataset()

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def test_zero_learning_rate_keeps_parameters(self):
        model = build_model(SMALL, rng_seed=3)
        before = {name: tensor.data.copy() for name, tensor in model.parameters().items()}
        train(model, self.samples, TrainConfig(iterations=1, batch_size=2, lr=0.0), validation=[])
        for name, tensor in model.parameters().items():
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_deterministic(self):
        config = TrainConfig(iterations=4, batch_size=2, eval_every=2, seed=7)
        first_model, first = train(build_model(SMALL), self.samples, config)
        second_model, second = train(build_model(SMALL), self.samples, config)
        self.assertEqual(first.to_jsonl(), second.to_jsonl())
        for name, tensor in first_model.parameters().items():
            np.testing.assert_array_equal(tensor.data, second_model.parameters()[name].data)

    def test_history_and_checkpoint(self):
        config = TrainConfig(
            iterations=4,
            batch_size=2,
            eval_every=2,
            checkpoint_path=str(self.out / "model.ckpt"),
            history_path=str(self.out / "history.jsonl"),
        )
        _, history = train(build_model(SMALL), self.samples, config)
        self.assertEqual([record["iteration"] for record in history.records], [2, 4])
        for key in ("train", "skipped", "val_epe", "val_epe_normalized", "val_mae", "val_loss"):
            self.assertIn(key, history.last)
        self.assertTrue((self.out / "model.ckpt").is_file())
        lines = (self.out / "history.jsonl").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        _, _, metadata = load_checkpoint(self.out / "model.ckpt")
        self.assertIn(metadata["iteration"], (2, 4))
        self.assertEqual(metadata["p"], 1.5)

    def test_warm_start_restores_loss(self):
        path = str(self.out / "warm.ckpt")
        first = TrainConfig(iterations=1, batch_size=2, lr=0.0, seed=2, checkpoint_path=path)
        train(build_model(SMALL, rng_seed=0), self.samples, first, validation=[])
        _, first_adam, metadata = load_checkpoint(path)

        resumed = str(self.out / "resumed.ckpt")
        second = TrainConfig(
            iterations=1, batch_size=2, lr=0.0, seed=2, warm_start=path, checkpoint_path=resumed
        )
        _, history = train(build_model(SMALL, rng_seed=9), self.samples, second, validation=[])
        self.assertEqual(history.last["train"]["total"], metadata["loss"])

        # same weights and batch, so the second gradient equals the first
        _, second_adam, _ = load_checkpoint(resumed)
        self.assertEqual(second_adam.step, 2)
        for name, m in first_adam.m.items():
            np.testing.assert_allclose(second_adam.m[name], 1.9 * m, rtol=1e-9, atol=1e-300)
            np.testing.assert_allclose(
                second_adam.v[name], 1.999 * first_adam.v[name], rtol=1e-9, atol=1e-300
            )

    def test_degenerate_batch_keeps_running_statistics(self):
        rig = CameraRig.create(64.0, 1.0, 2.0)
        samples = generate_dataset(
            2, SceneConfig(height=16, width=16, depth_range=(0.5, 1.5)), rig
        )
        model = build_model(SMALL)
        before = {name: array.copy() for name, array in model.buffers().items()}
        with self.assertRaises(DegenerateProjectionError):
            batch_loss(model, samples, rig, TrainConfig(rig=rig), "train", seed=1)
        for name, array in model.buffers().items():
            np.testing.assert_array_equal(array, before[name])

    def test_checkpoint_records_decoding_settings(self):
        path = self.out / "disparity.ckpt"
        rig = CameraRig.create(64.0, 0.1, 10.0, z_min=0.5)
        config = TrainConfig(
            iterations=1,
            batch_size=2,
            mode="disparity",
            adjust_disparity=False,
            loss=LossConfig(1.0, 0.0),
            rig=rig,
            checkpoint_path=str(path),
        )
        model = build_model(ModelConfig(base_channels=4, growth=4, decoder_channels=8, output_mode="disparity"))
        train(model, self.samples, config, validation=[])
        _, _, metadata = load_checkpoint(path)
        self.assertIs(metadata["adjust_disparity"], False)
        self.assertEqual(metadata["p"], 1.5)

    def test_aborts_when_projection_is_always_empty(self):
        """Disparities wider than the image leave nothing to compare."""
        rig = CameraRig.create(64.0, 1.0, 2.0)
        samples = generate_dataset(
            2, SceneConfig(height=16, width=16, depth_range=(0.5, 1.5)), rig
        )
        config = TrainConfig(iterations=2, batch_size=1, rig=rig)
        with self.assertRaises(TrainingAbortedError):
            train(build_model(SMALL), samples, config, validation=[])

    def test_projection_free_training_tolerates_wide_disparity(self):
        rig = CameraRig.create(64.0, 1.0, 2.0)
        samples = generate_dataset(
            2, SceneConfig(height=16, width=16, depth_range=(0.5, 1.5)), rig
        )
        config = TrainConfig(
            iterations=2, batch_size=1, rig=rig, loss=LossConfig(1.0, 0.0, False)
        )
        _, history = train(build_model(SMALL), samples, config, validation=[])
        self.assertEqual(history.last["skipped"], 0)


class TestCheckpoint(unittest.TestCase):
    """Test the binary checkpoint format."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.path = Path(self.temp_dir) / "model.ckpt"
        self.model = build_model(SMALL, rng_seed=1)
        params = self.model.parameters()
        self.adam = AdamState.create(params, lr=5e-4)
        rng = np.random.default_rng(0)
        grads = {name: rng.normal(size=tensor.shape) for name, tensor in params.items()}
        adam_step(params, grads, self.adam)
        self.model.modules["stem"].norm.running_mean[...] = 0.25

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def test_roundtrip(self):
        save_checkpoint(self.path, self.model, self.adam, {"iteration": 3, "loss": 0.5})
        model, adam, metadata = load_checkpoint(self.path)
        self.assertEqual(model.config, SMALL)
        for name, array in self.model.state().items():
            np.testing.assert_array_equal(model.state()[name], array)
        for name in self.adam.m:
            np.testing.assert_array_equal(adam.m[name], self.adam.m[name])
            np.testing.assert_array_equal(adam.v[name], self.adam.v[name])
        self.assertEqual(adam.step, 1)
        self.assertEqual(adam.lr, 5e-4)
        self.assertEqual(metadata, {"iteration": 3, "loss": 0.5})

    def test_eval_forward_survives_roundtrip(self):
        left = np.random.default_rng(2).random((1, 3, 16, 16))
        right = np.random.default_rng(3).random((1, 3, 16, 16))
        before = predict(self.model, left, right)
        save_checkpoint(self.path, self.model, self.adam)
        model, _, _ = load_checkpoint(self.path)
        np.testing.assert_array_equal(predict(model, left, right), before)

    def test_single_precision_roundtrip(self):
        config = ModelConfig(base_channels=4, growth=4, decoder_channels=8)
        model = build_model(config)
        save_checkpoint(self.path, model, AdamState.create(model.parameters()))
        restored, _, _ = load_checkpoint(self.path)
        self.assertEqual(restored.head.kernel.dtype, np.float32)
        np.testing.assert_array_equal(restored.head.kernel.data, model.head.kernel.data)

    def test_starts_with_magic(self):
        save_checkpoint(self.path, self.model, self.adam)
        self.assertEqual(self.path.read_bytes()[:4], CHECKPOINT_MAGIC)

    def test_corruption_detected(self):
        save_checkpoint(self.path, self.model, self.adam)
        data = bytearray(self.path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        self.path.write_bytes(bytes(data))
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_truncation_detected(self):
        save_checkpoint(self.path, self.model, self.adam)
        self.path.write_bytes(self.path.read_bytes()[:-20])
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_bad_magic(self):
        self.path.write_bytes(b"NOPE" + bytes(32))
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_mismatched_config(self):
        save_checkpoint(self.path, self.model, self.adam)
        other = ModelConfig(base_channels=8, growth=4, decoder_channels=8, precision="float64")
        with self.assertRaises(ShapeError) as raised:
            load_checkpoint(self.path, expected=other)
        self.assertIn("stem.kernel", str(raised.exception))


def test_nan_validation_error_still_writes_checkpoint(mocker, tmp_path):
    undefined = EvalReport(float("nan"), float("nan"), float("nan"), 0.0, "cm")
    mocker.patch("depthsynth.train.evaluate", return_value=undefined)
    mocker.patch("depthsynth.train.evaluate_loss", return_value=float("nan"))
    path = tmp_path / "model.ckpt"
    config = TrainConfig(iterations=4, batch_size=2, eval_every=2, checkpoint_path=str(path))

    train(build_model(SMALL), small_dataset(), config)

    assert path.is_file()
    _, _, metadata = load_checkpoint(path)
    assert metadata["iteration"] == 2


if __name__ == "__main__":
    unittest.main()

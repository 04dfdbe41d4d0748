#!/usr/bin/env python3
"""Unit tests for end-point error, view error and dataset evaluation."""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from depthsynth.data import Layer, SceneConfig, ValueNoise, generate_dataset, generate_scene, render_scene
from depthsynth.errors import DegenerateMetricError, ShapeError
from depthsynth.geometry import AdjustmentParams, CameraRig, synthesize_right
from depthsynth.metrics import epe, evaluate, mae_right
from depthsynth.model import ModelConfig, build_model

INTEGER_RIG = CameraRig.create(10.0, 1.0, 10.0)
SMALL = ModelConfig(base_channels=4, growth=4, decoder_channels=8, precision="float64")


class TestEndPointError(unittest.TestCase):
    """Test the mean absolute map difference."""

    def test_equal_maps(self):
        values = np.random.default_rng(0).random((4, 4))
        self.assertEqual(epe(values, values), 0.0)

    def test_constant_offset(self):
        values = np.random.default_rng(1).random((4, 4))
        self.assertAlmostEqual(epe(values + 1.0, values), 1.0, places=12)

    def test_half_the_pixels(self):
        gt = np.zeros((2, 4))
        pred = gt.copy()
        pred[0] = 2.0
        self.assertEqual(epe(pred, gt), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            epe(np.zeros((2, 2)), np.zeros((2, 3)))


class TestViewError(unittest.TestCase):
    """Test the synthesized right-view error."""

    def setUp(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(2)
        self.reference = np.round(rng.random((3, 4, 6)) * 255.0) / 255.0
        self.holes = np.zeros((4, 6), dtype=bool)
        self.holes[:, :2] = True

    def test_identical(self):
        self.assertEqual(mae_right(self.reference, self.holes, self.reference), 0.0)

    def test_constant_offset(self):
        shifted = self.reference + 10.0 / 255.0
        self.assertAlmostEqual(mae_right(shifted, self.holes, self.reference), 10.0, places=9)

    def test_holes_are_ignored(self):
        changed = self.reference.copy()
        changed[:, :, :2] = 1.0 - changed[:, :, :2]
        self.assertEqual(mae_right(changed, self.holes, self.reference), 0.0)

    def test_all_holes(self):
        with self.assertRaises(DegenerateMetricError):
            mae_right(self.reference, np.ones((4, 6), dtype=bool), self.reference)

    def test_mask_shape(self):
        with self.assertRaises(ShapeError):
            mae_right(self.reference, np.zeros((4, 5), dtype=bool), self.reference)


class TestGroundTruthSynthesis(unittest.TestCase):
    """Whole-pixel ground truth reproduces the rendered right view."""

    def test_single_plane(self):
        config = SceneConfig(seed=6, height=16, width=32, layer_count=0, depth_range=(1.0, 2.0))
        sample = generate_scene(config, INTEGER_RIG)
        synthesized, holes = synthesize_right(sample.left, sample.disparity, sample.depth)
        self.assertTrue(holes[:, 27:].all())
        self.assertFalse(holes[:, :27].any())
        self.assertLess(mae_right(synthesized, holes, sample.right), 2.0)

    def test_occluding_bar(self):
        rng = np.random.default_rng(7)
        background = Layer(0, 48, 0, 16, 2.0, ValueNoise(rng))
        bar = Layer(20, 30, 4, 12, 1.0, ValueNoise(rng))
        sample = render_scene([bar], background, INTEGER_RIG, 16, 48)
        synthesized, holes = synthesize_right(sample.left, sample.disparity, sample.depth)

        expected = np.zeros((16, 48), dtype=bool)
        expected[:, 43:] = True
        expected[4:12, 20:25] = True
        np.testing.assert_array_equal(holes, expected)
        self.assertEqual(mae_right(synthesized, holes, sample.right), 0.0)


class TestEvaluate(unittest.TestCase):
    """Test dataset-level evaluation."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.rig = CameraRig.create(64.0, 0.1, 10.0)
        self.samples = generate_dataset(2, SceneConfig(height=16, width=16, layer_count=1), self.rig)
        self.model = build_model(SMALL)

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def test_depth_report(self):
        report = evaluate(self.model, self.samples, self.rig, AdjustmentParams(1.5))
        self.assertEqual(report.unit, "cm")
        self.assertEqual([record["sample"] for record in report.records], [0, 1])
        self.assertAlmostEqual(
            report.epe, float(np.mean([record["epe"] for record in report.records])), places=12
        )
        # centimeters against a z_max of 10 m
        self.assertAlmostEqual(report.epe / 100.0 / 10.0, report.epe_normalized, places=9)
        self.assertGreaterEqual(report.mae_right, 0.0)
        self.assertTrue(0.0 <= report.hole_fraction <= 1.0)

    def test_disparity_report(self):
        model = build_model(
            ModelConfig(base_channels=4, growth=4, decoder_channels=8, output_mode="disparity")
        )
        rig = CameraRig.create(64.0, 0.1, 10.0, z_min=0.5)
        report = evaluate(model, self.samples, rig, AdjustmentParams(1.0), "disparity")
        self.assertEqual(report.unit, "px")
        self.assertAlmostEqual(report.epe / rig.d_max, report.epe_normalized, places=9)

    def test_jsonl(self):
        report = evaluate(self.model, self.samples, self.rig, AdjustmentParams(1.5))
        path = Path(self.temp_dir) / "report.jsonl"
        report.write(path)
        lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
        self.assertEqual(len(lines), 3)
        self.assertEqual(lines[-1]["sample"], "summary")
        self.assertEqual(set(lines[0]), {"sample", "epe", "epe_normalized", "mae_right", "hole_fraction"})

    def test_empty(self):
        with self.assertRaises(DegenerateMetricError):
            evaluate(self.model, [], self.rig, AdjustmentParams(1.5))


if __name__ == "__main__":
    unittest.main()

#!/usr/bin/env python3
"""Tests for the depthsynth-cli entry point."""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

from depthsynth.cli import build_parser, main
from depthsynth.config import RUN_FILE
from depthsynth.data import RIG_FILE, decode_ppm
from depthsynth.metrics import EvalReport

TINY = """\
base_channels: 4
growth: 4
decoder_channels: 8
size: 16
count: 4
iterations: 2
batch: 2
"""


class TestCommandLine(unittest.TestCase):
    """Run subcommands end to end on tiny settings."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.dir = Path(self.temp_dir)
        self.config = self.dir / "tiny.yaml"
        self.config.write_text(TINY, encoding="utf-8")

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def run_cli(self, *argv):
        return main([argv[0], "--config", str(self.config), *argv[1:]])

    def test_gen_data(self):
        out = self.dir / "data"
        self.assertEqual(self.run_cli("gen-data", "--out", str(out), "--seed", "4"), 0)
        names = {path.name for path in out.iterdir()}
        self.assertIn(RIG_FILE, names)
        self.assertIn(RUN_FILE, names)
        self.assertIn("0003_gt.pfm", names)

    def test_gen_data_is_reproducible(self):
        first, second = self.dir / "a", self.dir / "b"
        self.run_cli("gen-data", "--out", str(first))
        self.run_cli("gen-data", "--out", str(second))
        for path in first.iterdir():
            if path.name == RUN_FILE:
                continue
            self.assertEqual(path.read_bytes(), (second / path.name).read_bytes(), path.name)

    def test_train_then_eval(self):
        train_dir = self.dir / "train"
        self.assertEqual(self.run_cli("train", "--out", str(train_dir)), 0)
        checkpoint = train_dir / "model.ckpt"
        self.assertTrue(checkpoint.is_file())
        self.assertTrue((train_dir / "history.jsonl").is_file())
        self.assertTrue((train_dir / RUN_FILE).is_file())

        eval_dir = self.dir / "eval"
        code = self.run_cli(
            "eval", "--out", str(eval_dir), "--checkpoint", str(checkpoint), "--seed", "9"
        )
        self.assertEqual(code, 0)
        lines = (eval_dir / "report.jsonl").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 5)
        self.assertEqual(json.loads(lines[-1])["unit"], "cm")

    def test_train_is_reproducible(self):
        first, second = self.dir / "a", self.dir / "b"
        self.run_cli("train", "--out", str(first))
        self.run_cli("train", "--out", str(second))
        self.assertEqual((first / "model.ckpt").read_bytes(), (second / "model.ckpt").read_bytes())
        self.assertEqual(
            (first / "history.jsonl").read_bytes(), (second / "history.jsonl").read_bytes()
        )

    def test_train_on_saved_dataset(self):
        data = self.dir / "data"
        self.run_cli("gen-data", "--out", str(data))
        code = self.run_cli("train", "--out", str(self.dir / "train"), "--data", str(data))
        self.assertEqual(code, 0)

    def test_synthesize(self):
        train_dir = self.dir / "train"
        self.run_cli("train", "--out", str(train_dir))
        out = self.dir / "synth"
        code = self.run_cli(
            "synthesize", "--out", str(out), "--checkpoint", str(train_dir / "model.ckpt"), "--count", "2"
        )
        self.assertEqual(code, 0)
        image = decode_ppm((out / "0001_synth.ppm").read_bytes())
        holes = decode_ppm((out / "0001_holes.ppm").read_bytes())
        self.assertEqual(image.shape, (3, 16, 16))
        self.assertTrue(set(holes.ravel().tolist()) <= {0.0, 1.0})

    def test_bad_flag(self):
        self.assertEqual(main(["train", "--no-such-flag"]), 2)

    def test_bad_choice(self):
        self.assertEqual(main(["train", "--mode", "normals"]), 2)

    def test_missing_command(self):
        self.assertEqual(main([]), 2)

    def test_invalid_setting(self):
        self.assertEqual(self.run_cli("gen-data", "--size", "20", "--out", str(self.dir / "x")), 2)

    def test_eval_needs_checkpoint(self):
        self.assertEqual(self.run_cli("eval", "--out", str(self.dir / "eval")), 2)

    def test_missing_checkpoint_file(self):
        code = self.run_cli(
            "eval", "--out", str(self.dir / "eval"), "--checkpoint", str(self.dir / "absent.ckpt")
        )
        self.assertEqual(code, 1)

    def test_mode_mismatch(self):
        train_dir = self.dir / "train"
        self.run_cli("train", "--out", str(train_dir))
        code = self.run_cli(
            "eval",
            "--out",
            str(self.dir / "eval"),
            "--checkpoint",
            str(train_dir / "model.ckpt"),
            "--mode",
            "disparity",
        )
        self.assertEqual(code, 2)

    def test_parser_lists_commands(self):
        parser = build_parser()
        args = parser.parse_args(["bench", "--bench-size", "32", "-v"])
        self.assertEqual(args.command, "bench")
        self.assertEqual(args.bench_size, 32)
        self.assertTrue(args.verbose)
        self.assertIsNone(args.lr)


def test_bench_reports_latency(mocker, capsys, tmp_path):
    config = tmp_path / "tiny.yaml"
    config.write_text(TINY, encoding="utf-8")
    stats = {"size": 16, "repeats": 3, "mean_seconds": 0.002, "min_seconds": 0.001, "max_seconds": 0.003}
    bench = mocker.patch("depthsynth.cli.benchmark_forward", return_value=stats)

    assert main(["bench", "--config", str(config), "--repeats", "3", "--bench-size", "16"]) == 0

    model, size, repeats, seed = bench.call_args.args
    assert (size, repeats, seed) == (16, 3, 0)
    assert model.config.base_channels == 4
    assert "mean 2.0 ms" in capsys.readouterr().out


def test_eval_decodes_with_trained_disparity_setting(mocker, tmp_path):
    trained = tmp_path / "trained.yaml"
    trained.write_text(
        TINY + "mode: disparity\nadjust_disparity: false\nalpha_p: 0.0\nz_min: 0.5\n",
        encoding="utf-8",
    )
    train_dir = tmp_path / "train"
    assert main(["train", "--config", str(trained), "--out", str(train_dir)]) == 0

    report = EvalReport(1.0, 0.1, 2.0, 0.05, "px")
    evaluate = mocker.patch("depthsynth.cli.evaluate", return_value=report)
    config = tmp_path / "tiny.yaml"
    config.write_text(TINY + "z_min: 0.5\n", encoding="utf-8")
    code = main(
        [
            "eval",
            "--config",
            str(config),
            "--mode",
            "disparity",
            "--checkpoint",
            str(train_dir / "model.ckpt"),
            "--out",
            str(tmp_path / "eval"),
        ]
    )

    assert code == 0
    _, _, _, adjustment, mode, adjust_disparity = evaluate.call_args.args
    assert (adjustment.p, mode, adjust_disparity) == (1.5, "disparity", False)


def test_grad_check_exit_code(mocker):
    runner = mocker.patch("depthsynth.cli.GradientSuiteRunner")
    runner.return_value.run.return_value = False
    assert main(["grad-check", "--seeds", "1"]) == 1
    runner.assert_called_once_with(seeds=1)


if __name__ == "__main__":
    unittest.main()

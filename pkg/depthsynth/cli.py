"""Command-line entry point: data generation, training, evaluation and tools."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, load_run_config
from .data import StereoSample, encode_ppm, generate_dataset, read_dataset, write_dataset
from .diagnostics import GradientSuiteRunner, benchmark_forward
from .errors import ConfigError, DepthSynthError
from .experiments import ABLATION_KINDS, run_ablation
from .geometry import (
    OUTPUT_MODES,
    AdjustmentParams,
    CameraRig,
    decode_prediction,
    prediction_to_disparity,
    synthesize_right,
)
from .metrics import evaluate
from .model import Model, build_model, predict
from .train import load_checkpoint, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# (flag, config key, type, help)
FLAGS: List[Tuple[str, str, Callable[[str], Any], str]] = [
    ("--seed", "seed", int, "Base random seed"),
    ("--size", "size", int, "Height and width of generated pairs"),
    ("--count", "count", int, "Number of generated pairs"),
    ("--iterations", "iterations", int, "Training iterations"),
    ("--batch", "batch", int, "Mini-batch size"),
    ("--lr", "lr", float, "Adam learning rate"),
    ("--p", "p", str, "Depth adjustment exponent in [1, 4], or 'auto'"),
    ("--alpha-z", "alpha_z", float, "Weight of the prediction loss"),
    ("--alpha-p", "alpha_p", float, "Weight of the projection loss"),
    ("--mode", "mode", str, "Network output: depth or disparity"),
    ("--out", "out", str, "Output directory"),
    ("--data", "data", str, "Input dataset directory"),
    ("--checkpoint", "checkpoint", str, "Checkpoint to read, or to write when training"),
    ("--warm-start", "warm_start", str, "Checkpoint to initialize training from"),
    ("--repeats", "repeats", int, "Timed forward passes (bench)"),
    ("--bench-size", "bench_size", int, "Pair size for bench"),
    ("--kind", "kind", str, "Ablation: exponent or projection"),
    ("--seeds", "seeds", int, "Seeds per gradient check or ablation arm"),
]
CHOICES = {"mode": OUTPUT_MODES, "kind": ABLATION_KINDS}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML run configuration")
    for flag, key, kind, text in FLAGS:
        common.add_argument(
            flag, dest=key, type=kind, default=None, choices=CHOICES.get(key), help=text
        )
    common.add_argument(
        "--verbose",
        "-v",
        action="store_const",
        const=True,
        default=None,
        help="Debug logging",
    )

    parser = argparse.ArgumentParser(
        prog="depthsynth-cli",
        description="Stereo depth estimation for view synthesis",
    )
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True
    for name, text in (
        ("gen-data", "Generate a synthetic stereo dataset"),
        ("train", "Train a model and write a checkpoint"),
        ("eval", "Evaluate a checkpoint"),
        ("synthesize", "Synthesize right views from predictions"),
        ("grad-check", "Compare analytic and numerical gradients"),
        ("bench", "Time eval-mode forward passes"),
        ("ablate", "Run a seeded two-arm ablation"),
    ):
        commands.add_parser(name, parents=[common], help=text, description=text)
    return parser


def setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def _samples(config: RunConfig) -> Tuple[List[StereoSample], CameraRig]:
    """The ``--data`` dataset, or pairs generated from the run settings."""
    if config["data"]:
        samples, rig, stored_mode = read_dataset(config["data"])
        if stored_mode != config["mode"]:
            logger.info(
                "dataset stores %s ground truth; converting for %s output",
                stored_mode,
                config["mode"],
            )
        return samples, rig
    rig = config.rig()
    return generate_dataset(config["count"], config.scene(), rig), rig


def _checkpoint(config: RunConfig) -> Tuple[Model, Dict[str, Any]]:
    if not config["checkpoint"]:
        raise ConfigError("--checkpoint is required for this command")
    model, _, metadata = load_checkpoint(config["checkpoint"])
    if model.config.output_mode != config["mode"]:
        raise ConfigError(
            f"checkpoint predicts {model.config.output_mode} but mode is {config['mode']}"
        )
    return model, metadata


def _stored_adjustment(
    config: RunConfig, metadata: Dict[str, Any], samples: Sequence[StereoSample], rig: CameraRig
) -> Tuple[AdjustmentParams, bool]:
    """The exponent and disparity switch the checkpoint was trained with.

    Older checkpoints without them fall back to the run settings.
    """
    adjust_disparity = bool(metadata.get("adjust_disparity", config["adjust_disparity"]))
    if "p" in metadata:
        return AdjustmentParams(float(metadata["p"])), adjust_disparity
    return config.adjustment(samples, rig), adjust_disparity


def _output_dir(config: RunConfig) -> Path:
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def cmd_gen_data(config: RunConfig) -> int:
    out_dir = _output_dir(config)
    rig = config.rig()
    samples = generate_dataset(config["count"], config.scene(), rig)
    write_dataset(out_dir, samples, config["mode"])
    config.write(out_dir)
    print(f"✅ Wrote {len(samples)} stereo pairs to {out_dir}")
    return 0


def cmd_train(config: RunConfig) -> int:
    out_dir = _output_dir(config)
    samples, rig = _samples(config)
    adjustment = config.adjustment(samples, rig)
    model = build_model(config.model(), rng_seed=config["seed"])
    logger.info("model has %d parameters", model.parameter_count())
    train_config = config.train(adjustment, rig, out_dir)
    _, history = train(model, samples, train_config)
    config.write(out_dir)

    last = history.last or {}
    print(f"✅ Trained {config['iterations']} iterations, checkpoint {train_config.checkpoint_path}")
    if "val_epe" in last:
        unit = "cm" if config["mode"] == "depth" else "px"
        print(f"   Validation EPE: {last['val_epe']:.4f} {unit}, MAE {last['val_mae']:.3f}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    out_dir = _output_dir(config)
    model, metadata = _checkpoint(config)
    samples, rig = _samples(config)
    adjustment, adjust_disparity = _stored_adjustment(config, metadata, samples, rig)
    report = evaluate(model, samples, rig, adjustment, config["mode"], adjust_disparity)
    report.write(out_dir / "report.jsonl")
    config.write(out_dir)

    print("\n📊 EVALUATION SUMMARY")
    print("=" * 30)
    print(f"Samples: {len(report.records)}")
    print(f"EPE: {report.epe:.4f} {report.unit} ({report.epe_normalized:.4f} normalized)")
    print(f"MAE (right view): {report.mae_right:.3f}")
    print(f"Hole fraction: {report.hole_fraction:.3f}")
    print()
    return 0


def cmd_synthesize(config: RunConfig) -> int:
    out_dir = _output_dir(config)
    model, metadata = _checkpoint(config)
    samples, rig = _samples(config)
    adjustment, adjust_disparity = _stored_adjustment(config, metadata, samples, rig)
    mode = config["mode"]
    for index, sample in enumerate(samples):
        pred = predict(model, sample.left[None], sample.right[None])[0, 0].astype(np.float64)
        disparity = prediction_to_disparity(pred, rig, adjustment, mode, adjust_disparity)
        depth = None
        if mode == "depth":
            depth = decode_prediction(pred, rig, adjustment, mode, adjust_disparity)
        image, holes = synthesize_right(sample.left, disparity, depth)
        (out_dir / f"{index:04d}_synth.ppm").write_bytes(encode_ppm(image))
        mask = np.repeat(holes[None].astype(np.float64), 3, axis=0)
        (out_dir / f"{index:04d}_holes.ppm").write_bytes(encode_ppm(mask))
        logger.debug("sample %d: %.3f holes", index, float(np.mean(holes)))
    config.write(out_dir)
    print(f"✅ Synthesized {len(samples)} right views into {out_dir}")
    return 0


def cmd_grad_check(config: RunConfig) -> int:
    runner = GradientSuiteRunner(seeds=config["seeds"])
    return 0 if runner.run() else 1


def cmd_bench(config: RunConfig) -> int:
    if config["checkpoint"]:
        model, _ = _checkpoint(config)
    else:
        model = build_model(config.model(), rng_seed=config["seed"])
    stats = benchmark_forward(model, config["bench_size"], config["repeats"], config["seed"])
    print(
        f"⏱️  {stats['size']}x{stats['size']} forward: mean {stats['mean_seconds'] * 1000:.1f} ms "
        f"(min {stats['min_seconds'] * 1000:.1f}, max {stats['max_seconds'] * 1000:.1f}) "
        f"over {stats['repeats']} runs"
    )
    return 0


def cmd_ablate(config: RunConfig) -> int:
    out_dir = _output_dir(config)
    result = run_ablation(
        config["kind"],
        seeds=config["seeds"],
        rig=config.rig(),
        count=config["count"],
        size=config["size"],
        iterations=config["iterations"],
        model_config=config.model(),
        batch_size=config["batch"],
        lr=config["lr"],
        train_ratio=config["train_ratio"],
    )
    result.print_results()
    (out_dir / "ablation.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    config.write(out_dir)
    return 0


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "synthesize": cmd_synthesize,
    "grad-check": cmd_grad_check,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return int(exit_request.code or 0)

    overrides = {key: getattr(args, key) for _, key, _, _ in FLAGS}
    overrides["verbose"] = args.verbose
    setup_logging(bool(args.verbose))
    try:
        config = load_run_config(args.config, overrides)
        setup_logging(config["verbose"])
        logger.info("%s with resolved configuration:\n%s", args.command, config.dump())
        return COMMANDS[args.command](config)
    except ConfigError as err:
        logger.error("%s: invalid settings: %s", args.command, err)
        print(f"❌ {args.command}: {err}")
        return 2
    except (DepthSynthError, OSError) as err:
        logger.error("%s failed: %s", args.command, err)
        print(f"❌ {args.command}: {err}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Gradient-check suite and forward-pass benchmark."""

import logging
import time
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import ContractError
from .geometry import AdjustmentParams, CameraRig, encode_target
from .loss import LossConfig, projection_loss, total_loss
from .model import Model, predict
from .ops import BatchNormState, ConvSpec
from .tensor import Tensor, grad_check

logger = logging.getLogger(__name__)

Case = Tuple[Callable[..., Tensor], List[Tensor]]
CaseFactory = Callable[[np.random.Generator, int], Case]


def _tensor(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64))


def _away_from_zero(rng: np.random.Generator, shape, low=0.1, high=2.0) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, shape)


def _fractional(rng: np.random.Generator, shape, low: int, high: int) -> np.ndarray:
    """Values whose distance to the nearest integer is at least 0.1."""
    return rng.integers(low, high, shape) + rng.uniform(0.1, 0.9, shape)


def _binary(op):
    def factory(rng, seed):
        shape = (1, 2, 3, 3)
        return op, [_tensor(rng.normal(size=shape)), _tensor(rng.normal(size=shape))]

    return factory


def _unary(op, sampler=None):
    def factory(rng, seed):
        shape = (1, 2, 3, 3)
        values = sampler(rng, shape) if sampler else rng.normal(size=shape)
        return op, [_tensor(values)]

    return factory


def _conv(dilation: int, stride: int = 1):
    def factory(rng, seed):
        def op(x, kernel, bias):
            spec = ConvSpec(kernel, bias, stride, dilation, ops.same_padding(3, dilation))
            return ops.conv2d(x, spec)

        inputs = [
            _tensor(rng.normal(size=(1, 3, 8, 8))),
            _tensor(rng.normal(size=(2, 3, 3, 3))),
            _tensor(rng.normal(size=(1, 2, 1, 1))),
        ]
        return op, inputs

    return factory


def _batchnorm(mode: str):
    def factory(rng, seed):
        running_mean = rng.normal(size=(1, 3, 1, 1))
        running_var = rng.uniform(0.5, 2.0, (1, 3, 1, 1))

        def op(x, gamma, beta):
            state = BatchNormState(gamma, beta, running_mean.copy(), running_var.copy())
            return ops.batchnorm(x, state, mode, update_stats=False)

        inputs = [
            _tensor(rng.normal(size=(2, 3, 4, 4))),
            _tensor(rng.uniform(0.5, 1.5, (1, 3, 1, 1))),
            _tensor(rng.normal(size=(1, 3, 1, 1))),
        ]
        return op, inputs

    return factory


def _maxpool(rng, seed):
    # distinct values so no window has a near tie
    values = rng.permutation(64).reshape(1, 1, 8, 8) * 0.1
    return (lambda x: ops.maxpool(x, 2)), [_tensor(values + rng.uniform(0, 0.01, values.shape))]


def _concat(rng, seed):
    inputs = [_tensor(rng.normal(size=(1, 2, 3, 3))), _tensor(rng.normal(size=(1, 3, 3, 3)))]
    return (lambda a, b: ops.concat([a, b])), inputs


def _dropout(rng, seed):
    return (lambda x: ops.dropout(x, 0.2, "train", seed)), [_tensor(rng.normal(size=(1, 2, 4, 4)))]


def _warp(rng, seed):
    image = rng.uniform(0.0, 1.0, (1, 2, 3, 10))
    disparity = _fractional(rng, (1, 1, 3, 10), 0, 4)
    return (lambda img, d: ops.warp_rows(img, d)[0]), [_tensor(image), _tensor(disparity)]


CHAIN_RIG = CameraRig.create(64.0, 0.1, 10.0)
CHAIN_ADJUSTMENT = AdjustmentParams(1.5)


def _chain_inputs(rng) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    shape = (1, 3, 4, 12)
    left = rng.uniform(0.0, 1.0, shape)
    right = rng.uniform(0.0, 1.0, shape)
    disparity = _fractional(rng, (1, 1, 4, 12), 1, 5)
    pred = encode_target(CHAIN_RIG.fb / disparity, CHAIN_RIG, CHAIN_ADJUSTMENT)
    target = np.clip(pred + rng.normal(0.0, 0.05, pred.shape), 0.0, 1.0)
    return left, right, pred, target


def _projection_chain(rng, seed):
    left, right, pred, _ = _chain_inputs(rng)

    def op(x):
        return projection_loss(x, left, right, CHAIN_RIG, CHAIN_ADJUSTMENT)[0]

    return op, [_tensor(pred)]


def _total_chain(rng, seed):
    left, right, pred, target = _chain_inputs(rng)
    config = LossConfig(1.0, 1.0, True)

    def op(x):
        return total_loss(x, target, left, right, CHAIN_RIG, CHAIN_ADJUSTMENT, config).total

    return op, [_tensor(pred)]


def _mask(rng, seed):
    mask = rng.random((1, 1, 3, 3)) < 0.6
    mask[0, 0, 0, 0] = True
    return (lambda x: ops.masked_mean(x, mask)), [_tensor(rng.normal(size=(1, 2, 3, 3)))]


def _positive(rng, shape):
    return rng.uniform(0.5, 1.5, shape)


def _outside_clip(rng, shape):
    inner = rng.uniform(0.1, 0.9, shape)
    outer = rng.uniform(1.1, 1.9, shape)
    magnitude = np.where(rng.random(shape) < 0.5, inner, outer)
    return rng.choice([-1.0, 1.0], size=shape) * magnitude


GRADIENT_CHECKS: Dict[str, Tuple[str, CaseFactory]] = {
    "identity": ("Identity", _unary(ops.identity)),
    "add": ("Addition", _binary(ops.add)),
    "sub": ("Subtraction", _binary(ops.sub)),
    "mul": ("Elementwise product", _binary(ops.mul)),
    "affine": ("Affine map", _unary(lambda x: ops.affine(x, -1.7, 0.3))),
    "power": ("Power", _unary(lambda x: ops.power(x, 1.0 / 1.5), _positive)),
    "reciprocal": ("Reciprocal", _unary(lambda x: ops.reciprocal(x, 6.4), _positive)),
    "clip": ("Clip", _unary(lambda x: ops.clip(x, -1.0, 1.0), _outside_clip)),
    "square": ("Square", _unary(ops.square)),
    "mean": ("Mean", _unary(ops.mean)),
    "masked_mean": ("Masked mean", _mask),
    "relu": ("ReLU", _unary(ops.relu, _away_from_zero)),
    "sigmoid": ("Sigmoid", _unary(ops.sigmoid)),
    "conv2d.l1": ("Convolution, dilation 1", _conv(1)),
    "conv2d.l2": ("Convolution, dilation 2", _conv(2)),
    "conv2d.l3": ("Convolution, dilation 3", _conv(3)),
    "conv2d.l4": ("Convolution, dilation 4", _conv(4)),
    "conv2d.stride2": ("Convolution, stride 2", _conv(1, stride=2)),
    "batchnorm.train": ("Batchnorm, train mode", _batchnorm("train")),
    "batchnorm.eval": ("Batchnorm, eval mode", _batchnorm("eval")),
    "maxpool": ("Max pooling", _maxpool),
    "upsample2x": ("Nearest upsampling", _unary(ops.upsample2x)),
    "concat": ("Channel concatenation", _concat),
    "split": ("Channel split", _unary(lambda x: ops.split(x, [1, 1])[1])),
    "dropout": ("Dropout", _dropout),
    "warp_rows": ("Row warp", _warp),
    "projection_loss": ("Projection loss chain", _projection_chain),
    "total_loss": ("Total loss chain", _total_chain),
}


class GradientSuiteRunner:
    """Runs every gradient check over several seeds and reports results."""

    def __init__(
        self,
        seeds: int = 5,
        eps: float = 1e-5,
        tolerance: float = 1e-4,
        checks: Optional[Sequence[str]] = None,
    ):
        """Initialize the runner."""
        unknown = sorted(set(checks or []) - set(GRADIENT_CHECKS))
        if unknown:
            raise ContractError(f"unknown gradient checks: {', '.join(unknown)}")
        self.seeds = seeds
        self.eps = eps
        self.tolerance = tolerance
        self.checks = list(checks) if checks else list(GRADIENT_CHECKS)
        self.results: Dict[str, Dict[str, Any]] = {}

    def run_check(self, name: str) -> Dict[str, Any]:
        """Run one check over every seed and return its worst error."""
        description, factory = GRADIENT_CHECKS[name]
        start_time = time.time()
        worst = 0.0
        message = ""
        try:
            for seed in range(self.seeds):
                op, inputs = factory(np.random.default_rng(seed), seed)
                worst = max(worst, grad_check(op, inputs, eps=self.eps, seed=seed))
        except Exception as e:
            message = f"{type(e).__name__}: {e}"
            worst = float("inf")
        duration = time.time() - start_time
        return {
            "description": description,
            "passed": not message and worst < self.tolerance,
            "max_error": worst,
            "message": message,
            "duration": duration,
        }

    def run_all_checks(self) -> bool:
        """Run all gradient checks."""
        all_passed = True
        total_duration = 0.0

        print("🔍 Running gradient checks")
        print("=" * 60)
        print()

        for name in self.checks:
            result = self.run_check(name)
            self.results[name] = result
            total_duration += result["duration"]
            if result["passed"]:
                print(f"  ✅ {result['description']}: {result['max_error']:.2e} ({result['duration']:.2f}s)")
            else:
                print(f"  ❌ {result['description']}: {result['max_error']:.2e} ({result['duration']:.2f}s)")
                all_passed = False

        print()
        print(f"Total execution time: {total_duration:.2f}s")
        print("=" * 60)
        return all_passed

    def print_detailed_results(self):
        """Print failures with their messages."""
        for name, result in self.results.items():
            if result["passed"]:
                continue
            print(f"\n📋 {result['description']} ({name})")
            print("-" * 50)
            print(f"Max relative error: {result['max_error']:.3e} (tolerance {self.tolerance:.0e})")
            if result["message"]:
                print(f"Error: {result['message']}")

    def print_summary(self):
        """Print test summary."""
        total = len(self.results)
        passed = sum(1 for r in self.results.values() if r["passed"])
        failed = total - passed

        print("\n📊 GRADIENT SUMMARY")
        print("=" * 30)
        print(f"Total checks: {total}")
        print(f"Passed: {passed}")
        print(f"Failed: {failed}")
        if failed == 0:
            print(f"\n🎉 All gradients agree with finite differences ({self.seeds} seeds each).")
        else:
            print(f"\n⚠️  {failed} check(s) failed. Please review the errors above.")
        print()

    def run(self) -> bool:
        """Run the complete suite."""
        all_passed = self.run_all_checks()
        self.print_detailed_results()
        self.print_summary()
        return all_passed

    def max_errors(self) -> Dict[str, float]:
        return {name: result["max_error"] for name, result in self.results.items()}


def benchmark_forward(
    model: Model, size: int = 256, repeats: int = 5, seed: int = 0
) -> Dict[str, Any]:
    """Time eval-mode forward passes on one random ``size`` x ``size`` pair.

    One untimed warm-up pass runs first.
    """
    if repeats < 1:
        raise ContractError(f"repeats must be positive, got {repeats}")
    rng = np.random.default_rng(seed)
    left = rng.random((1, 3, size, size))
    right = rng.random((1, 3, size, size))
    predict(model, left, right)
    timings = []
    for _ in range(repeats):
        start_time = time.perf_counter()
        predict(model, left, right)
        timings.append(time.perf_counter() - start_time)
    stats = {
        "size": size,
        "repeats": repeats,
        "mean_seconds": float(np.mean(timings)),
        "min_seconds": float(np.min(timings)),
        "max_seconds": float(np.max(timings)),
    }
    logger.info("forward %dx%d: mean %.4fs over %d runs", size, size, stats["mean_seconds"], repeats)
    return stats

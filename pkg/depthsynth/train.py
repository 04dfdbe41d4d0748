"""Adam training loop, checkpoints and training history."""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .data import StereoSample, split_dataset
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateProjectionError,
    FormatError,
    TrainingAbortedError,
)
from .geometry import AdjustmentParams, CameraRig, encode_target
from .loss import LossBreakdown, LossConfig, total_loss
from .metrics import evaluate
from .model import Model, ModelConfig, build_model, forward, predict
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1
CHECKSUM_BYTES = 8
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class AdamState:
    """First and second moment accumulators per parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, Tensor], **hyper: float) -> "AdamState":
        state = cls(**hyper)  # type: ignore[arg-type]
        for name, tensor in params.items():
            state.m[name] = np.zeros(tensor.shape, dtype=np.float64)
            state.v[name] = np.zeros(tensor.shape, dtype=np.float64)
        return state

    def hyper(self) -> Dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(
    params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A parameter without an entry in ``grads`` is updated with a zero gradient.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, tensor in params.items():
        if name not in state.m:
            state.m[name] = np.zeros(tensor.shape, dtype=np.float64)
            state.v[name] = np.zeros(tensor.shape, dtype=np.float64)
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(tensor.shape, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != tensor.shape or state.m[name].shape != tensor.shape:
            raise ContractError(
                f"gradient for {name} has shape {grad.shape}, parameter has {tensor.shape}"
            )
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data -= update.astype(tensor.dtype)
    return state


@dataclass
class TrainConfig:
    """Settings of one training run."""

    iterations: int = 100
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    adjustment: AdjustmentParams = field(default_factory=lambda: AdjustmentParams(1.5))
    eval_every: int = 50
    checkpoint_path: Optional[str] = None
    warm_start: Optional[str] = None
    history_path: Optional[str] = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_ratio: float = 0.9
    mode: str = "depth"
    adjust_disparity: bool = True
    rig: Optional[CameraRig] = None

    def __post_init__(self):
        errors = []
        if self.iterations < 1:
            errors.append(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            errors.append(f"eval_every must be >= 1, got {self.eval_every}")
        if self.lr < 0:
            errors.append(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if errors:
            raise ConfigError("; ".join(errors))


class TrainHistory:
    """Evaluation records with strictly increasing iteration numbers."""

    def __init__(self):
        self.records: List[Dict[str, Any]] = []

    def append(self, record: Dict[str, Any]):
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ContractError(
                f"history iteration {record['iteration']} does not follow "
                f"{self.records[-1]['iteration']}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> Optional[Dict[str, Any]]:
        return self.records[-1] if self.records else None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(record, sort_keys=True) + "\n" for record in self.records)

    def write(self, path: Union[str, Path]):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            yield order[start : start + batch_size]


def stack_batch(
    samples: Sequence[StereoSample],
    rig: CameraRig,
    adjustment: AdjustmentParams,
    mode: str,
    adjust_disparity: bool,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left images, right images and encoded targets as NCHW arrays."""
    left = np.stack([sample.left for sample in samples])
    right = np.stack([sample.right for sample in samples])
    gt = np.stack([sample.gt_values(mode) for sample in samples])[:, None]
    target = encode_target(gt, rig, adjustment, mode, adjust_disparity)
    return left, right, target


def batch_loss(
    model: Model,
    samples: Sequence[StereoSample],
    rig: CameraRig,
    config: TrainConfig,
    mode: str = "train",
    seed: int = 0,
) -> LossBreakdown:
    """Loss of one mini-batch.

    Running statistics move only when the loss is computed; a degenerate
    batch leaves them as they were.
    """
    left, right, target = stack_batch(
        samples, rig, config.adjustment, config.mode, config.adjust_disparity
    )
    stats = {name: array.copy() for name, array in model.buffers().items()}
    pred = forward(model, left, right, mode, seed=seed)
    try:
        return total_loss(
            pred,
            target,
            left.astype(pred.dtype),
            right.astype(pred.dtype),
            rig,
            config.adjustment,
            config.loss,
            config.mode,
            config.adjust_disparity,
        )
    except DegenerateProjectionError:
        for name, array in model.buffers().items():
            array[...] = stats[name]
        raise


def checkpoint_metadata(step: int, loss: float, config: TrainConfig) -> Dict[str, Any]:
    """Everything eval needs to decode predictions of the saved model."""
    return {
        "iteration": step,
        "loss": loss,
        "p": config.adjustment.p,
        "adjust_disparity": config.adjust_disparity,
    }


def evaluate_loss(
    model: Model,
    samples: Sequence[StereoSample],
    rig: CameraRig,
    config: TrainConfig,
) -> float:
    """Mean eval-mode total loss over ``samples``; degenerate samples are skipped."""
    values = []
    for sample in samples:
        left, right, target = stack_batch(
            [sample], rig, config.adjustment, config.mode, config.adjust_disparity
        )
        pred = Tensor(predict(model, left, right))
        try:
            breakdown = total_loss(
                pred,
                target,
                left.astype(pred.dtype),
                right.astype(pred.dtype),
                rig,
                config.adjustment,
                config.loss,
                config.mode,
                config.adjust_disparity,
            )
        except DegenerateProjectionError:
            logger.warning("sample %d has no valid projection; left out of the loss", sample.sample_id)
            continue
        values.append(breakdown.value)
    if not values:
        return float("nan")
    return float(np.mean(values))


def train(
    model: Model,
    dataset: Sequence[StereoSample],
    config: TrainConfig,
    validation: Optional[Sequence[StereoSample]] = None,
) -> Tuple[Model, TrainHistory]:
    """Run ``config.iterations`` Adam steps over seeded shuffled mini-batches.

    Without an explicit ``validation`` set the dataset is split by
    ``config.train_ratio``. The checkpoint keeps the model with the best
    validation EPE (or the final model when nothing is held out).
    """
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    if validation is None and len(dataset) >= 2:
        train_set, validation = split_dataset(dataset, config.train_ratio, config.seed)
    else:
        train_set = list(dataset)
        validation = list(validation or [])
    rig = config.rig or train_set[0].rig

    params = model.parameters()
    adam = AdamState.create(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    if config.warm_start:
        restored, restored_adam, metadata = load_checkpoint(
            config.warm_start, expected=model.config
        )
        model.load_state(restored.state())
        adam.m, adam.v, adam.step = restored_adam.m, restored_adam.v, restored_adam.step
        logger.info(
            "warm start from %s (iteration %s, loss %s)",
            config.warm_start,
            metadata.get("iteration"),
            metadata.get("loss"),
        )

    history = TrainHistory()
    batches = _batches(len(train_set), config.batch_size, np.random.default_rng(config.seed))
    skipped = 0
    best_epe: Optional[float] = None
    last: Optional[Dict[str, Any]] = None
    for step in range(1, config.iterations + 1):
        batch = [train_set[index] for index in next(batches)]
        try:
            breakdown = batch_loss(model, batch, rig, config, "train", seed=step)
        except DegenerateProjectionError as err:
            skipped += 1
            logger.warning("skipping batch at iteration %d: %s", step, err)
            if skipped * 2 > config.iterations:
                raise TrainingAbortedError(
                    f"{skipped} of {config.iterations} batches had no valid projection"
                ) from err
            continue
        grads = breakdown.total.graph.backward(breakdown.total)  # type: ignore[union-attr]
        adam_step(params, grads, adam)
        last = breakdown.to_dict()

        if step % config.eval_every and step != config.iterations:
            continue
        record: Dict[str, Any] = {"iteration": step, "train": last, "skipped": skipped}
        if validation:
            report = evaluate(
                model, validation, rig, config.adjustment, config.mode, config.adjust_disparity
            )
            record.update(
                val_epe=report.epe,
                val_epe_normalized=report.epe_normalized,
                val_mae=report.mae_right,
                val_loss=evaluate_loss(model, validation, rig, config),
            )
            # NaN never beats a stored EPE; the first evaluation always saves
            epe = report.epe if np.isfinite(report.epe) else np.inf
            if config.checkpoint_path and (best_epe is None or epe < best_epe):
                best_epe = epe
                save_checkpoint(
                    config.checkpoint_path,
                    model,
                    adam,
                    checkpoint_metadata(step, last["total"], config),
                )
        history.append(record)
        logger.info(
            "iteration %d: loss %.5f (prediction %.5f, projection %.5f)%s",
            step,
            last["total"],
            last["prediction"],
            last["projection"],
            f", val EPE {record['val_epe']:.4f}" if validation else "",
        )

    if last is None:
        raise TrainingAbortedError("every training batch was skipped")
    if config.checkpoint_path and not validation:
        save_checkpoint(
            config.checkpoint_path,
            model,
            adam,
            checkpoint_metadata(config.iterations, last["total"], config),
        )
    if config.history_path:
        history.write(config.history_path)
    return model, history


# --------------------------------------------------------------------------
# Checkpoints


def _record(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    tag = 1 if array.dtype == np.float64 else 0
    if array.ndim != 4:
        raise ContractError(f"checkpoint entry {name} must have 4 extents, got {array.shape}")
    encoded = name.encode("utf-8")
    return (
        struct.pack("<H", len(encoded))
        + encoded
        + struct.pack("<B", tag)
        + struct.pack("<4I", *array.shape)
        + array.astype(DTYPE_TAGS[tag]).tobytes()
    )


def save_checkpoint(
    path: Union[str, Path],
    model: Model,
    adam: AdamState,
    metadata: Optional[Dict[str, Any]] = None,
):
    """Write parameters, running statistics, Adam state and config to ``path``."""
    header = {
        "model": model.config.to_dict(),
        "adam": dict(adam.hyper(), step=adam.step),
        "metadata": dict(metadata or {}),
    }
    text = yaml.safe_dump(header, sort_keys=True).encode("utf-8")
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<H", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(text)) + text
    for name, array in model.state().items():
        body += _record(f"model/{name}", array)
    for name in model.parameters():
        body += _record(f"adam.m/{name}", adam.m[name])
        body += _record(f"adam.v/{name}", adam.v[name])
    body += hashlib.blake2b(bytes(body), digest_size=CHECKSUM_BYTES).digest()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(body))
    logger.debug("saved checkpoint %s", path)


def _read(data: bytes, offset: int, size: int, what: str) -> Tuple[bytes, int]:
    if offset + size > len(data):
        raise FormatError(f"checkpoint truncated while reading {what}")
    return data[offset : offset + size], offset + size


def load_checkpoint(
    path: Union[str, Path], expected: Optional[ModelConfig] = None
) -> Tuple[Model, AdamState, Dict[str, Any]]:
    """Restore a model, its Adam state and the saved metadata.

    With ``expected`` the model is built from that config and every stored
    array must match its shape.
    """
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 2 + 4 + CHECKSUM_BYTES:
        raise FormatError(f"{path} is too short to be a checkpoint")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)")
    body, digest = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if hashlib.blake2b(body, digest_size=CHECKSUM_BYTES).digest() != digest:
        raise FormatError(f"{path} failed its checksum (truncated or corrupted)")

    offset = len(CHECKPOINT_MAGIC)
    raw, offset = _read(body, offset, 2, "version")
    (version,) = struct.unpack("<H", raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    raw, offset = _read(body, offset, 4, "config length")
    (length,) = struct.unpack("<I", raw)
    raw, offset = _read(body, offset, length, "config block")
    try:
        header = yaml.safe_load(raw.decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as err:
        raise FormatError(f"checkpoint config block is unreadable: {err}") from err
    if not isinstance(header, dict) or "model" not in header or "adam" not in header:
        raise FormatError("checkpoint config block lacks model or adam settings")

    arrays: Dict[str, np.ndarray] = {}
    while offset < len(body):
        raw, offset = _read(body, offset, 2, "record name length")
        (name_length,) = struct.unpack("<H", raw)
        raw, offset = _read(body, offset, name_length, "record name")
        name = raw.decode("utf-8")
        raw, offset = _read(body, offset, 1, f"dtype of {name}")
        tag = raw[0]
        if tag not in DTYPE_TAGS:
            raise FormatError(f"record {name} has unknown dtype tag {tag}")
        raw, offset = _read(body, offset, 16, f"extents of {name}")
        shape = struct.unpack("<4I", raw)
        dtype = DTYPE_TAGS[tag]
        raw, offset = _read(body, offset, int(np.prod(shape)) * dtype.itemsize, f"payload of {name}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    config = expected or ModelConfig.from_dict(header["model"])
    model = build_model(config, smoke_check=False)
    model.load_state({name[len("model/") :]: array for name, array in arrays.items() if name.startswith("model/")})

    adam_header = header["adam"]
    adam = AdamState(
        lr=adam_header["lr"],
        beta1=adam_header["beta1"],
        beta2=adam_header["beta2"],
        eps=adam_header["eps"],
        step=adam_header["step"],
    )
    for name, tensor in model.parameters().items():
        for kind, target in (("m", adam.m), ("v", adam.v)):
            key = f"adam.{kind}/{name}"
            if key not in arrays:
                raise FormatError(f"checkpoint lacks {key}")
            target[name] = np.array(arrays[key], dtype=np.float64)
    return model, adam, dict(header.get("metadata") or {})

"""Weighted prediction plus projection loss."""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, DegenerateProjectionError, ShapeError
from .geometry import AdjustmentParams, CameraRig, prediction_to_disparity, reconstruct_left
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    """Weights of the two loss terms."""

    alpha_z: float = 1.0
    alpha_p: float = 1.0
    enable_projection: bool = True

    def __post_init__(self):
        if self.alpha_z < 0 or self.alpha_p < 0:
            raise ConfigError(
                f"loss weights must be non-negative, got {self.alpha_z}, {self.alpha_p}"
            )
        if not self.alpha_z + self.alpha_p > 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    """Total loss tensor with its components and pixel counts."""

    total: Tensor
    prediction: float
    projection: float
    alpha_z: float
    alpha_p: float
    n_z: int
    n_p: int

    @property
    def value(self) -> float:
        return self.total.item()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total": self.value,
            "prediction": self.prediction,
            "projection": self.projection,
            "n_z": self.n_z,
            "n_p": self.n_p,
        }


def prediction_loss(pred: Tensor, target: Any) -> Tensor:
    """Mean squared error between the network output and the encoded target."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return ops.mean(ops.square(ops.sub(pred, target)))


def projection_loss(
    pred: Tensor,
    left: Any,
    right: Any,
    rig: CameraRig,
    adjustment: AdjustmentParams,
    mode: str = "depth",
    adjust_disparity: bool = True,
) -> Tuple[Tensor, int]:
    """Photometric error of the left view rebuilt from the right view.

    The prediction is decoded to disparity, the right image is resampled at
    ``i - d`` and the squared error against the left image is averaged over
    channels and the in-bounds pixels. Returns the loss and the number of
    in-bounds pixels.
    """
    left, right = as_tensor(left), as_tensor(right)
    if left.shape != right.shape:
        raise ShapeError(f"left {left.shape} and right {right.shape} differ")
    batch, _, height, width = left.shape
    if pred.shape != (batch, 1, height, width):
        raise ShapeError(f"prediction {pred.shape} does not match images {left.shape}")

    disparity = prediction_to_disparity(pred, rig, adjustment, mode, adjust_disparity)
    rebuilt, valid = reconstruct_left(right, disparity)
    n_p = int(np.count_nonzero(valid))
    if n_p == 0:
        raise DegenerateProjectionError(
            "every reconstructed pixel falls outside the right image"
        )
    error = ops.square(ops.sub(rebuilt, left))
    return ops.masked_mean(error, valid), n_p


def total_loss(
    pred: Tensor,
    target: Any,
    left: Any,
    right: Any,
    rig: CameraRig,
    adjustment: AdjustmentParams,
    config: LossConfig,
    mode: str = "depth",
    adjust_disparity: bool = True,
) -> LossBreakdown:
    """``alpha_z * prediction + alpha_p * projection``.

    The projection term is not computed when it is disabled or weighted by
    zero, so such a loss never raises ``DegenerateProjectionError``.
    """
    prediction = prediction_loss(pred, target)
    total = ops.scale(prediction, config.alpha_z)
    projection_value, n_p = 0.0, 0
    if config.enable_projection and config.alpha_p > 0:
        projection, n_p = projection_loss(
            pred, left, right, rig, adjustment, mode, adjust_disparity
        )
        projection_value = projection.item()
        total = ops.add(total, ops.scale(projection, config.alpha_p))
    return LossBreakdown(
        total=total,
        prediction=prediction.item(),
        projection=projection_value,
        alpha_z=config.alpha_z,
        alpha_p=config.alpha_p,
        n_z=int(pred.data.size),
        n_p=n_p,
    )

"""End-point error and synthesized-view error."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateMetricError, ShapeError
from .geometry import (
    AdjustmentParams,
    CameraRig,
    decode_prediction,
    normalization_scale,
    prediction_to_disparity,
    synthesize_right,
)
from .data import StereoSample
from .model import Model, predict

logger = logging.getLogger(__name__)

CM_PER_METER = 100.0


def epe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute difference of two maps in the same raw unit."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.size == 0:
        raise DegenerateMetricError("end-point error of an empty map")
    return float(np.mean(np.abs(pred - gt)))


def mae_right(synthesized: np.ndarray, holes: np.ndarray, reference: np.ndarray) -> float:
    """Mean absolute error on the 0-255 scale over non-hole pixels and channels."""
    synthesized = np.asarray(synthesized, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if synthesized.shape != reference.shape:
        raise ShapeError(f"synthesized {synthesized.shape} and reference {reference.shape} differ")
    filled = ~np.asarray(holes, dtype=bool)
    if filled.shape != synthesized.shape[-2:]:
        raise ShapeError(f"hole mask {filled.shape} does not match {synthesized.shape}")
    if not filled.any():
        raise DegenerateMetricError("synthesized view is all holes")
    difference = np.abs(synthesized - reference)[..., filled]
    return float(np.mean(difference) * 255.0)


@dataclass
class EvalReport:
    """Dataset-level means plus one record per sample."""

    epe: float
    epe_normalized: float
    mae_right: float
    hole_fraction: float
    unit: str
    records: List[Dict[str, Any]] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        return {
            "sample": "summary",
            "epe": self.epe,
            "epe_normalized": self.epe_normalized,
            "mae_right": self.mae_right,
            "hole_fraction": self.hole_fraction,
            "unit": self.unit,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(record, sort_keys=True) for record in self.records]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def evaluate(
    model: Model,
    samples: Sequence[StereoSample],
    rig: CameraRig,
    adjustment: AdjustmentParams,
    mode: str = "depth",
    adjust_disparity: bool = True,
) -> EvalReport:
    """Score eval-mode predictions on ``samples``.

    EPE is in pixels for disparity output and centimeters for depth output.
    The right view is synthesized from the predicted disparity with a depth
    z-buffer; samples whose synthesized view is all holes are left out of the
    MAE mean.
    """
    if not samples:
        raise DegenerateMetricError("cannot evaluate an empty sample set")
    scale = normalization_scale(rig, mode)
    unit = "cm" if mode == "depth" else "px"
    records: List[Dict[str, Any]] = []
    for sample in samples:
        pred = predict(model, sample.left[None], sample.right[None])[0, 0].astype(np.float64)
        raw = decode_prediction(pred, rig, adjustment, mode, adjust_disparity)
        error = epe(raw, sample.gt_values(mode))
        disparity = prediction_to_disparity(pred, rig, adjustment, mode, adjust_disparity)
        synthesized, holes = synthesize_right(
            sample.left, disparity, raw if mode == "depth" else None
        )
        mae: Optional[float]
        try:
            mae = mae_right(synthesized, holes, sample.right)
        except DegenerateMetricError:
            logger.warning("sample %d synthesizes to all holes; MAE skipped", sample.sample_id)
            mae = None
        records.append(
            {
                "sample": int(sample.sample_id),
                "epe": error * CM_PER_METER if mode == "depth" else error,
                "epe_normalized": error / scale,
                "mae_right": mae,
                "hole_fraction": float(np.mean(holes)),
            }
        )

    maes = [record["mae_right"] for record in records if record["mae_right"] is not None]
    if not maes:
        raise DegenerateMetricError("every synthesized view is all holes")
    return EvalReport(
        epe=float(np.mean([record["epe"] for record in records])),
        epe_normalized=float(np.mean([record["epe_normalized"] for record in records])),
        mae_right=float(np.mean(maes)),
        hole_fraction=float(np.mean([record["hole_fraction"] for record in records])),
        unit=unit,
        records=records,
    )

"""Depth and disparity conversions, depth adjustment and view warping.

Conventions: ``i`` is the column, ``j`` the row. Disparity is positive and
referenced to the left view, so left pixel ``(i, j)`` corresponds to right
pixel ``(i - d, j)``.

Functions that take a value map accept either a numpy array or a graph
``Tensor`` and return the same kind, so the training loss and the offline
tools share one implementation.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from . import ops
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEPTH_TO_DISPARITY = "depth_to_disparity"
DISPARITY_TO_DEPTH = "disparity_to_depth"
OUTPUT_MODES = ("depth", "disparity")

EXPONENT_GRID = np.round(1.0 + 0.05 * np.arange(61), 2)
PREDICTION_FLOOR = 1e-6

ValueMap = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo rig: focal length in pixels, baseline and depths in meters."""

    focal_length: float
    baseline: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ConfigError(f"focal length must be positive, got {self.focal_length}")
        if not self.baseline > 0:
            raise ConfigError(f"baseline must be positive, got {self.baseline}")
        if not 0 < self.z_min < self.z_max:
            raise ConfigError(
                f"need 0 < z_min < z_max, got z_min={self.z_min}, z_max={self.z_max}"
            )

    @classmethod
    def create(
        cls,
        focal_length: float,
        baseline: float,
        z_max: float,
        z_min: Optional[float] = None,
    ) -> "CameraRig":
        """Build a rig, defaulting ``z_min`` to ``z_max / 100``."""
        if z_min is None:
            z_min = z_max / 100.0
        return cls(float(focal_length), float(baseline), float(z_min), float(z_max))

    @property
    def fb(self) -> float:
        return self.focal_length * self.baseline

    @property
    def d_max(self) -> float:
        return self.fb / self.z_min

    @property
    def d_min(self) -> float:
        return self.fb / self.z_max

    def to_dict(self) -> Dict[str, float]:
        return {
            "f": self.focal_length,
            "B": self.baseline,
            "z_min": self.z_min,
            "z_max": self.z_max,
        }


@dataclass(frozen=True)
class AdjustmentParams:
    """Exponent ``p`` of the depth adjustment ``z' = z ** p``."""

    p: float = 1.0

    def __post_init__(self):
        if not self.p >= 1.0:
            raise ConfigError(f"adjustment exponent must be >= 1, got {self.p}")


class MapState(Enum):
    """Which quantity a DepthMap currently holds."""

    RAW = "raw"
    NORMALIZED = "normalized"
    ADJUSTED = "adjusted"
    PREDICTED = "predicted"
    RECOVERED = "recovered"


@dataclass
class DepthMap:
    """(H, W) depth values tagged with their normalization state."""

    values: np.ndarray
    state: MapState
    rig: CameraRig

    def validate(self, tolerance: float = 1e-9) -> "DepthMap":
        """Raise DataError when the values leave the range of their state."""
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"depth map must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("depth map holds non-finite values")
        if self.state is MapState.RAW:
            low, high = self.rig.z_min, self.rig.z_max
        else:
            low, high = 0.0, 1.0
        if values.size and (values.min() < low - tolerance or values.max() > high + tolerance):
            raise DataError(
                f"{self.state.value} depth map leaves [{low}, {high}]: "
                f"range [{values.min()}, {values.max()}]"
            )
        return self

    def normalized(self) -> "DepthMap":
        self._expect(MapState.RAW)
        return DepthMap(normalize_depth(self.values, self.rig), MapState.NORMALIZED, self.rig)

    def adjusted(self, params: AdjustmentParams) -> "DepthMap":
        self._expect(MapState.NORMALIZED)
        return DepthMap(adjust_depth(self.values, params), MapState.ADJUSTED, self.rig)

    def recovered(self, params: AdjustmentParams) -> "DepthMap":
        if self.state not in (MapState.ADJUSTED, MapState.PREDICTED):
            raise DataError(f"cannot invert the adjustment of a {self.state.value} map")
        return DepthMap(invert_adjust(self.values, params), MapState.RECOVERED, self.rig)

    def raw(self) -> "DepthMap":
        if self.state not in (MapState.NORMALIZED, MapState.RECOVERED):
            raise DataError(f"cannot denormalize a {self.state.value} map")
        return DepthMap(denormalize_depth(self.values, self.rig), MapState.RAW, self.rig)

    def _expect(self, state: MapState):
        if self.state is not state:
            raise DataError(f"expected a {state.value} map, got {self.state.value}")


@dataclass
class DisparityMap:
    """(H, W) left-referenced disparities in pixels."""

    values: np.ndarray
    rig: CameraRig

    def validate(self, tolerance: float = 1e-9) -> "DisparityMap":
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"disparity map must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("disparity map holds non-finite values")
        if values.size and (values.min() < -tolerance or values.max() > self.rig.d_max + tolerance):
            raise DataError(
                f"disparities leave [0, {self.rig.d_max}]: "
                f"range [{values.min()}, {values.max()}]"
            )
        return self

    def to_depth(self) -> DepthMap:
        depth = convert(self.values, self.rig, DISPARITY_TO_DEPTH)
        return DepthMap(depth, MapState.RAW, self.rig)


# --------------------------------------------------------------------------
# Array/tensor dispatch


def _clip(values: ValueMap, low: float, high: float) -> ValueMap:
    if isinstance(values, Tensor):
        return ops.clip(values, low, high)
    return np.clip(values, low, high)


def _power(values: ValueMap, exponent: float) -> ValueMap:
    if isinstance(values, Tensor):
        return ops.power(values, exponent)
    return np.power(values, exponent)


def _affine(values: ValueMap, factor: float, shift: float) -> ValueMap:
    if isinstance(values, Tensor):
        return ops.affine(values, factor, shift)
    return factor * np.asarray(values) + shift


def _reciprocal(values: ValueMap, numerator: float) -> ValueMap:
    if isinstance(values, Tensor):
        return ops.reciprocal(values, numerator)
    return numerator / np.asarray(values)


def _check_mode(mode: str):
    if mode not in OUTPUT_MODES:
        raise ConfigError(f"output mode must be one of {OUTPUT_MODES}, got {mode!r}")


# --------------------------------------------------------------------------
# Conversions and adjustment


def convert(values: ValueMap, rig: CameraRig, direction: str) -> ValueMap:
    """Apply ``z = fB / d`` in either direction after clamping to the rig range."""
    if direction == DEPTH_TO_DISPARITY:
        return _reciprocal(_clip(values, rig.z_min, rig.z_max), rig.fb)
    if direction == DISPARITY_TO_DEPTH:
        return _reciprocal(_clip(values, rig.d_min, rig.d_max), rig.fb)
    raise ConfigError(f"unknown conversion direction {direction!r}")


def normalize_depth(depth: ValueMap, rig: CameraRig) -> ValueMap:
    """``1 - z / z_max`` of the clamped depth."""
    return _affine(_clip(depth, rig.z_min, rig.z_max), -1.0 / rig.z_max, 1.0)


def denormalize_depth(normalized: ValueMap, rig: CameraRig) -> ValueMap:
    return _affine(normalized, -rig.z_max, rig.z_max)


def adjust_depth(normalized: ValueMap, params: AdjustmentParams) -> ValueMap:
    """Stretch near-camera values: ``z' = z ** p``."""
    if params.p == 1.0:
        return normalized if isinstance(normalized, Tensor) else np.array(normalized)
    return _power(normalized, params.p)


def invert_adjust(predicted: ValueMap, params: AdjustmentParams) -> ValueMap:
    if params.p == 1.0:
        return predicted if isinstance(predicted, Tensor) else np.array(predicted)
    return _power(predicted, 1.0 / params.p)


def normalization_scale(rig: CameraRig, mode: str) -> float:
    """Raw-unit length of one normalized unit in the given output mode."""
    _check_mode(mode)
    return rig.z_max if mode == "depth" else rig.d_max


def encode_target(
    ground_truth: ValueMap,
    rig: CameraRig,
    params: AdjustmentParams,
    mode: str = "depth",
    adjust_disparity: bool = True,
) -> ValueMap:
    """Map raw ground truth (meters or pixels) to the network's [0, 1] target."""
    _check_mode(mode)
    if mode == "depth":
        return adjust_depth(normalize_depth(ground_truth, rig), params)
    scaled = _clip(_affine(ground_truth, 1.0 / rig.d_max, 0.0), 0.0, 1.0)
    return adjust_depth(scaled, params) if adjust_disparity else scaled


def decode_prediction(
    predicted: ValueMap,
    rig: CameraRig,
    params: AdjustmentParams,
    mode: str = "depth",
    adjust_disparity: bool = True,
) -> ValueMap:
    """Map network output back to raw depth (meters) or disparity (pixels)."""
    _check_mode(mode)
    if mode == "depth":
        recovered = invert_adjust(_clip(predicted, PREDICTION_FLOOR, 1.0), params)
        return _clip(denormalize_depth(recovered, rig), rig.z_min, rig.z_max)
    if adjust_disparity and params.p != 1.0:
        recovered = invert_adjust(_clip(predicted, PREDICTION_FLOOR, 1.0), params)
    else:
        recovered = predicted
    return _affine(recovered, rig.d_max, 0.0)


def prediction_to_disparity(
    predicted: ValueMap,
    rig: CameraRig,
    params: AdjustmentParams,
    mode: str = "depth",
    adjust_disparity: bool = True,
) -> ValueMap:
    """Disparity in pixels implied by the network output."""
    decoded = decode_prediction(predicted, rig, params, mode, adjust_disparity)
    if mode == "depth":
        return _reciprocal(decoded, rig.fb)
    return decoded


def fit_exponent(samples: Any, bins: int = 32) -> AdjustmentParams:
    """Pick the grid exponent in [1, 4] whose transformed histogram is flattest.

    Flatness is the sum of squared differences between the bin fractions and
    ``1 / bins``. Ties go to the smallest exponent.
    """
    values = np.asarray(samples, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise DataError("cannot fit an exponent to an empty sample set")
    if bins < 8:
        raise ConfigError(f"exponent fitting needs at least 8 bins, got {bins}")
    if values.min() < 0.0 or values.max() > 1.0:
        raise DataError("exponent fitting samples must lie in [0, 1]")

    best_p, best_score = 1.0, np.inf
    for p in EXPONENT_GRID:
        counts, _ = np.histogram(np.power(values, p), bins=bins, range=(0.0, 1.0))
        score = float(np.sum((counts / values.size - 1.0 / bins) ** 2))
        if score < best_score - 1e-12:
            best_p, best_score = float(p), score
    logger.debug("fitted exponent p=%.2f (flatness %.3e)", best_p, best_score)
    return AdjustmentParams(best_p)


# --------------------------------------------------------------------------
# Warping


def sample_row(image: np.ndarray, row: int, x: float) -> Optional[Any]:
    """Linearly interpolate ``image`` along ``row`` at column ``x``.

    ``image`` is (H, W) or (C, H, W). Returns None when ``x`` lies outside
    ``[0, W - 1]``.
    """
    image = np.asarray(image)
    width = image.shape[-1]
    if not 0.0 <= x <= width - 1:
        return None
    line = image[..., row, :]
    if width == 1:
        return line[..., 0]
    left = min(int(np.floor(x)), width - 2)
    fraction = x - left
    return (1.0 - fraction) * line[..., left] + fraction * line[..., left + 1]


def reconstruct_left(
    right: Union[np.ndarray, Tensor], disparity: Union[np.ndarray, Tensor]
) -> Tuple[Union[np.ndarray, Tensor], np.ndarray]:
    """Resample the right view at ``i - d`` to rebuild the left view.

    Tensors are (N, C, H, W) with (N, 1, H, W) disparities and keep their
    graph. Arrays are (C, H, W) or (H, W) with an (H, W) disparity; the result
    and mask come back as arrays of the input layout and (H, W).
    """
    if isinstance(right, Tensor):
        return ops.warp_rows(right, _as_tensor(disparity))

    image = np.asarray(right, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    if image.ndim != 3:
        raise ShapeError(f"image must be (C,H,W) or (H,W), got shape {image.shape}")
    disparities = np.asarray(disparity, dtype=np.float64)
    if disparities.shape != image.shape[1:]:
        raise ShapeError(
            f"disparity shape {disparities.shape} does not match image {image.shape}"
        )
    warped, valid = ops.warp_rows(Tensor(image[None]), Tensor(disparities[None, None]))
    output = warped.data[0]
    return (output[0] if squeeze else output), valid[0, 0]


def _as_tensor(value: Union[np.ndarray, Tensor]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value))


def synthesize_right(
    left: np.ndarray,
    disparity: np.ndarray,
    depth: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Forward-splat the left view into the right view.

    Each left pixel lands on column ``round(i - d)``. When several pixels land
    on one target the smallest depth wins (largest disparity when no depth is
    given), then the leftmost source column. Returns the image and an (H, W)
    hole mask that is true where nothing landed.
    """
    image = np.asarray(left)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    channels, height, width = image.shape
    disparities = np.asarray(disparity, dtype=np.float64)
    if disparities.shape != (height, width):
        raise ShapeError(
            f"disparity shape {disparities.shape} does not match image {image.shape}"
        )
    key = -disparities if depth is None else np.asarray(depth, dtype=np.float64)
    if key.shape != (height, width):
        raise ShapeError(f"depth shape {key.shape} does not match image {image.shape}")

    rows, columns = np.indices((height, width))
    target = np.floor(columns - disparities + 0.5).astype(np.int64)
    inside = (target >= 0) & (target < width)
    src_row, src_col = rows[inside], columns[inside]
    flat_target = src_row * width + target[inside]

    order = np.lexsort((src_col, key[inside], flat_target))
    landed, first = np.unique(flat_target[order], return_index=True)
    winner = order[first]

    output = np.zeros((channels, height * width), dtype=image.dtype)
    output[:, landed] = image[:, src_row[winner], src_col[winner]]
    holes = np.ones(height * width, dtype=bool)
    holes[landed] = False

    output = output.reshape(channels, height, width)
    holes = holes.reshape(height, width)
    return (output[0] if squeeze else output), holes

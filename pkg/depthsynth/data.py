"""Procedural stereo scenes with exact ground truth, and dataset files.

A scene is a textured background plane at the far depth plus a few
fronto-parallel rectangles. Every layer has one constant disparity, so the
right view, the ground truth and the occlusion mask follow exactly from the
layer geometry.

Dataset directory layout::

    0000_left.ppm   0000_right.ppm   0000_gt.pfm
    0001_left.ppm   ...
    rig.cfg
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, FormatError, UnsupportedFormatError
from .geometry import (
    DISPARITY_TO_DEPTH,
    OUTPUT_MODES,
    CameraRig,
    DepthMap,
    DisparityMap,
    MapState,
    convert,
)

logger = logging.getLogger(__name__)

LATTICE_LEVELS = 4096
LATTICE_PERIOD = 64
TEXTURE_FLOOR = 0.2
TEXTURE_SPAN = 0.6
RIG_FILE = "rig.cfg"


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the procedural scene generator."""

    seed: int = 0
    height: int = 64
    width: int = 64
    layer_count: int = 3
    depth_range: Tuple[float, float] = (0.8, 4.0)
    octaves: int = 3
    base_frequency: float = 1.0 / 32.0
    near_heavy: bool = False

    def validate(self, rig: CameraRig) -> "SceneConfig":
        """Raise ConfigError for unusable settings."""
        errors = []
        if self.height < 1 or self.width < 1:
            errors.append(f"image size must be positive, got {self.height}x{self.width}")
        if self.layer_count < 0:
            errors.append(f"layer_count must be >= 0, got {self.layer_count}")
        z_near, z_far = self.depth_range
        if not 0 < z_near < z_far:
            errors.append(f"depth_range must satisfy 0 < near < far, got {self.depth_range}")
        elif z_near < rig.z_min or z_far > rig.z_max:
            errors.append(
                f"depth_range {self.depth_range} leaves the rig range "
                f"[{rig.z_min}, {rig.z_max}]"
            )
        if self.octaves < 1:
            errors.append(f"octaves must be >= 1, got {self.octaves}")
        if not 0 < self.base_frequency <= 0.5:
            errors.append(f"base_frequency must be in (0, 0.5], got {self.base_frequency}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


class ValueNoise:
    """Smooth multi-octave value noise over a periodic integer lattice.

    Lattice values are integers drawn from the generator, so the texture only
    depends on the seed. Evaluates to (channels, ...) values in
    ``[0.2, 0.8]``.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int = 3,
        octaves: int = 3,
        base_frequency: float = 1.0 / 32.0,
    ):
        self.octaves = octaves
        self.base_frequency = base_frequency
        levels = rng.integers(
            0, LATTICE_LEVELS, size=(octaves, channels, LATTICE_PERIOD, LATTICE_PERIOD)
        )
        self.lattice = levels / float(LATTICE_LEVELS - 1)

    def __call__(self, rows: np.ndarray, columns: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        columns = np.asarray(columns, dtype=np.float64)
        total = 0.0
        weight = 0.0
        for octave in range(self.octaves):
            frequency = self.base_frequency * 2.0**octave
            u, v = columns * frequency, rows * frequency
            u0, v0 = np.floor(u), np.floor(v)
            su, sv = _smoothstep(u - u0), _smoothstep(v - v0)
            iu0 = u0.astype(np.int64) % LATTICE_PERIOD
            iv0 = v0.astype(np.int64) % LATTICE_PERIOD
            iu1 = (iu0 + 1) % LATTICE_PERIOD
            iv1 = (iv0 + 1) % LATTICE_PERIOD
            grid = self.lattice[octave]
            top = grid[:, iv0, iu0] * (1.0 - su) + grid[:, iv0, iu1] * su
            bottom = grid[:, iv1, iu0] * (1.0 - su) + grid[:, iv1, iu1] * su
            amplitude = 0.5**octave
            total = total + amplitude * (top * (1.0 - sv) + bottom * sv)
            weight += amplitude
        return TEXTURE_FLOOR + TEXTURE_SPAN * total / weight


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit levels ``k / 255``."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5) / 255.0


@dataclass
class Layer:
    """Fronto-parallel textured rectangle covering columns [x0, x1), rows [y0, y1)."""

    x0: int
    x1: int
    y0: int
    y1: int
    depth: float
    texture: ValueNoise


@dataclass
class StereoSample:
    """Rectified image pair with exact left-view ground truth."""

    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    disparity: np.ndarray
    rig: CameraRig
    occlusion_mask: Optional[np.ndarray] = None
    sample_id: int = 0
    layers: List[Layer] = field(default_factory=list, repr=False)

    @property
    def height(self) -> int:
        return self.left.shape[1]

    @property
    def width(self) -> int:
        return self.left.shape[2]

    def ground_truth(self, mode: str) -> Union[DepthMap, DisparityMap]:
        if mode == "depth":
            return DepthMap(self.depth, MapState.RAW, self.rig)
        if mode == "disparity":
            return DisparityMap(self.disparity, self.rig)
        raise ConfigError(f"output mode must be one of {OUTPUT_MODES}, got {mode!r}")

    def gt_values(self, mode: str) -> np.ndarray:
        return np.asarray(self.ground_truth(mode).values)


def render_scene(
    layers: Sequence[Layer],
    background: Layer,
    rig: CameraRig,
    height: int,
    width: int,
    sample_id: int = 0,
) -> StereoSample:
    """Render both views, ground truth and occlusion mask of a layered scene.

    ``background`` covers the whole image plane regardless of its bounds.
    The nearest layer wins wherever several overlap. Right-view pixel ``r``
    shows layer ``k`` when ``round(r + d_k)`` lies in its column range, with
    texture value ``T_k(r + d_k)``.
    """
    rows, columns = np.indices((height, width))
    rows_f = rows.astype(np.float64)
    columns_f = columns.astype(np.float64)
    everything = [background] + list(layers)
    disparities = [rig.fb / layer.depth for layer in everything]

    def covering(layer: Layer, source_columns: np.ndarray) -> np.ndarray:
        return (
            (rows >= layer.y0)
            & (rows < layer.y1)
            & (source_columns >= layer.x0)
            & (source_columns < layer.x1)
        )

    left_label = np.zeros((height, width), dtype=np.int64)
    right_label = np.zeros((height, width), dtype=np.int64)
    left_depth = np.full((height, width), background.depth)
    right_depth = np.full((height, width), background.depth)
    for index, layer in enumerate(everything[1:], start=1):
        seen_left = covering(layer, columns) & (layer.depth < left_depth)
        left_label[seen_left] = index
        left_depth[seen_left] = layer.depth

        shifted = np.floor(columns_f + disparities[index] + 0.5).astype(np.int64)
        seen_right = covering(layer, shifted) & (layer.depth < right_depth)
        right_label[seen_right] = index
        right_depth[seen_right] = layer.depth

    left = np.zeros((3, height, width))
    right = np.zeros((3, height, width))
    for index, layer in enumerate(everything):
        on_left = left_label == index
        if on_left.any():
            left[:, on_left] = layer.texture(rows_f[on_left], columns_f[on_left])
        on_right = right_label == index
        if on_right.any():
            right[:, on_right] = layer.texture(
                rows_f[on_right], columns_f[on_right] + disparities[index]
            )

    disparity = rig.fb / left_depth
    occlusion_mask = _visible_in_both(left_label, right_label, disparity)
    return StereoSample(
        left=quantize(left),
        right=quantize(right),
        depth=left_depth,
        disparity=disparity,
        rig=rig,
        occlusion_mask=occlusion_mask,
        sample_id=sample_id,
        layers=list(layers),
    )


def _visible_in_both(
    left_label: np.ndarray, right_label: np.ndarray, disparity: np.ndarray
) -> np.ndarray:
    height, width = left_label.shape
    rows, columns = np.indices((height, width))
    position = columns - disparity
    inside = (position >= 0) & (position <= width - 1)
    low = np.clip(np.floor(position), 0, width - 1).astype(np.int64)
    high = np.clip(np.ceil(position), 0, width - 1).astype(np.int64)
    return (
        inside
        & (right_label[rows, low] == left_label)
        & (right_label[rows, high] == left_label)
    )


def generate_scene(config: SceneConfig, rig: CameraRig, sample_id: int = 0) -> StereoSample:
    """Build one deterministic scene from ``(config.seed, sample_id)``."""
    config.validate(rig)
    rng = np.random.default_rng([config.seed, sample_id])
    height, width = config.height, config.width
    z_near, z_far = config.depth_range

    def texture() -> ValueNoise:
        return ValueNoise(rng, 3, config.octaves, config.base_frequency)

    background = Layer(0, width, 0, height, float(z_far), texture())
    layers = []
    for _ in range(config.layer_count):
        layer_w = int(rng.integers(max(1, width // 8), max(1, width // 2) + 1))
        layer_h = int(rng.integers(max(1, height // 8), max(1, height // 2) + 1))
        x0 = int(rng.integers(0, width - layer_w + 1))
        y0 = int(rng.integers(0, height - layer_h + 1))
        u = float(rng.random())
        if config.near_heavy:
            u = u * u
        depth = z_near + (z_far - z_near) * u
        layers.append(Layer(x0, x0 + layer_w, y0, y0 + layer_h, depth, texture()))
    return render_scene(layers, background, rig, height, width, sample_id)


def generate_dataset(count: int, config: SceneConfig, rig: CameraRig) -> List[StereoSample]:
    if count < 1:
        raise ConfigError(f"count must be positive, got {count}")
    samples = [generate_scene(config, rig, sample_id=index) for index in range(count)]
    logger.info(
        "generated %d scenes of %dx%d (seed %d)",
        count,
        config.height,
        config.width,
        config.seed,
    )
    return samples


def split_dataset(
    samples: Sequence[StereoSample], ratio: float = 0.9, seed: int = 0
) -> Tuple[List[StereoSample], List[StereoSample]]:
    """Seeded shuffle, then the first ``round(ratio * n)`` samples train."""
    if not samples:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    total = len(samples)
    n_train = int(np.floor(ratio * total + 0.5))
    if total >= 2:
        n_train = min(max(n_train, 1), total - 1)
    else:
        n_train = total
    order = np.random.default_rng(seed).permutation(total)
    train = [samples[index] for index in order[:n_train]]
    test = [samples[index] for index in order[n_train:]]
    return train, test


# --------------------------------------------------------------------------
# Codecs


def _header_tokens(data: bytes, count: int, kind: str) -> Tuple[List[str], int]:
    """Read ``count`` whitespace-separated header tokens and one separator byte."""
    tokens: List[str] = []
    position = 0
    while len(tokens) < count:
        while position < len(data) and data[position : position + 1].isspace():
            position += 1
        if data[position : position + 1] == b"#":
            end = data.find(b"\n", position)
            position = len(data) if end < 0 else end + 1
            continue
        start = position
        while position < len(data) and not data[position : position + 1].isspace():
            position += 1
        if start == position:
            raise FormatError(f"truncated {kind} header")
        try:
            tokens.append(data[start:position].decode("ascii"))
        except UnicodeDecodeError as err:
            raise FormatError(f"{kind} header is not ASCII") from err
    if position >= len(data) or not data[position : position + 1].isspace():
        raise FormatError(f"{kind} header is not terminated")
    return tokens, position + 1


def _dimensions(tokens: Sequence[str], kind: str) -> Tuple[int, int]:
    if not all(re.fullmatch(r"\d+", token) for token in tokens):
        raise FormatError(f"bad {kind} dimensions: {' '.join(tokens)}")
    width, height = (int(token) for token in tokens)
    return width, height


def encode_pfm(values: np.ndarray) -> bytes:
    """Grayscale little-endian PFM, bottom row first."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"PFM holds a 2-D map, got shape {values.shape}")
    height, width = values.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.flipud(values).astype("<f4").tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4, "PFM")
    magic = tokens[0]
    if magic == "PF":
        raise UnsupportedFormatError("color PFM is not supported, only grayscale 'Pf'")
    if magic != "Pf":
        raise FormatError(f"not a PFM file (magic {magic!r})")
    width, height = _dimensions(tokens[1:3], "PFM")
    try:
        scale = float(tokens[3])
    except ValueError as err:
        raise FormatError(f"bad PFM scale {tokens[3]!r}") from err
    if scale == 0.0 or not np.isfinite(scale):
        raise FormatError(f"bad PFM scale {tokens[3]!r}")
    dtype = "<f4" if scale < 0 else ">f4"
    payload = data[offset:]
    expected = width * height * 4
    if len(payload) != expected:
        raise FormatError(f"PFM payload has {len(payload)} bytes, expected {expected}")
    rows = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return np.flipud(rows).astype(np.float32)


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 with maxval 255 from a (3, H, W) image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM holds a (3, H, W) image, got shape {image.shape}")
    _, height, width = image.shape
    levels = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(levels.transpose(1, 2, 0)).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4, "PPM")
    magic = tokens[0]
    if magic in ("P1", "P2", "P3", "P4", "P5"):
        raise UnsupportedFormatError(f"only binary color PPM (P6) is supported, got {magic}")
    if magic != "P6":
        raise FormatError(f"not a PPM file (magic {magic!r})")
    width, height = _dimensions(tokens[1:3], "PPM")
    if tokens[3] != "255":
        raise UnsupportedFormatError(f"only maxval 255 is supported, got {tokens[3]}")
    payload = data[offset:]
    expected = width * height * 3
    if len(payload) != expected:
        raise FormatError(f"PPM payload has {len(payload)} bytes, expected {expected}")
    levels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return levels.transpose(2, 0, 1) / 255.0


# --------------------------------------------------------------------------
# Dataset directories


def write_rig_file(path: Path, rig: CameraRig, mode: str):
    lines = [f"{key} = {value!r}" for key, value in rig.to_dict().items()]
    lines.append(f"mode = {mode}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_rig_file(path: Path) -> Tuple[CameraRig, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values: Dict[str, str] = {}
    with open(path, "r", encoding="ascii") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    missing = [key for key in ("f", "B", "z_min", "z_max", "mode") if key not in values]
    if missing:
        raise FormatError(f"{path}: missing keys {', '.join(missing)}")
    if values["mode"] not in OUTPUT_MODES:
        raise FormatError(f"{path}: unknown mode {values['mode']!r}")
    try:
        rig = CameraRig(
            focal_length=float(values["f"]),
            baseline=float(values["B"]),
            z_min=float(values["z_min"]),
            z_max=float(values["z_max"]),
        )
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from err
    return rig, values["mode"]


def write_dataset(directory: Union[str, Path], samples: Sequence[StereoSample], mode: str = "depth"):
    """Write samples and ``rig.cfg``; ground truth is depth or disparity per ``mode``."""
    if mode not in OUTPUT_MODES:
        raise ConfigError(f"output mode must be one of {OUTPUT_MODES}, got {mode!r}")
    if not samples:
        raise DataError("no samples to write")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, sample in enumerate(samples):
        stem = directory / f"{index:04d}"
        Path(f"{stem}_left.ppm").write_bytes(encode_ppm(sample.left))
        Path(f"{stem}_right.ppm").write_bytes(encode_ppm(sample.right))
        Path(f"{stem}_gt.pfm").write_bytes(encode_pfm(sample.gt_values(mode)))
    write_rig_file(directory / RIG_FILE, samples[0].rig, mode)
    logger.info("wrote %d samples to %s", len(samples), directory)


def read_dataset(directory: Union[str, Path]) -> Tuple[List[StereoSample], CameraRig, str]:
    """Load a dataset directory; returns the samples, the rig and the gt mode."""
    directory = Path(directory)
    rig_path = directory / RIG_FILE
    if not rig_path.is_file():
        raise DataError(f"{directory} has no {RIG_FILE}")
    rig, mode = read_rig_file(rig_path)
    stems = sorted(path.name[: -len("_left.ppm")] for path in directory.glob("[0-9][0-9][0-9][0-9]_left.ppm"))
    if not stems:
        raise DataError(f"{directory} holds no samples")

    samples = []
    for stem in stems:
        try:
            left = decode_ppm((directory / f"{stem}_left.ppm").read_bytes())
            right = decode_ppm((directory / f"{stem}_right.ppm").read_bytes())
            gt = decode_pfm((directory / f"{stem}_gt.pfm").read_bytes()).astype(np.float64)
        except FileNotFoundError as err:
            raise DataError(f"incomplete sample {stem}: {err}") from err
        if left.shape != right.shape or gt.shape != left.shape[1:]:
            raise DataError(f"sample {stem} has mismatched extents")
        if mode == "depth":
            depth = np.clip(gt, rig.z_min, rig.z_max)
            disparity = rig.fb / depth
        else:
            disparity = np.clip(gt, 0.0, rig.d_max)
            depth = convert(disparity, rig, DISPARITY_TO_DEPTH)
        samples.append(
            StereoSample(left, right, depth, disparity, rig, sample_id=int(stem))
        )
    logger.info("read %d samples from %s", len(samples), directory)
    return samples, rig, mode

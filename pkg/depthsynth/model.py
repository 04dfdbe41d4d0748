"""Encoder-decoder depth network.

Layout, with ``S = log2(downscale)``::

    concat(left, right) -> stem -> maxpool(downscale)
      -> branch.l{l} for every dilation l, concatenated
      -> dense.0 .. dense.3
      -> S x (upsample2x -> concat skip -> decoder.s)
      -> head (1x1 conv) -> sigmoid

The skip pyramid runs the left image through its own conv module and pools
it to every decoder scale.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, ShapeError
from .geometry import OUTPUT_MODES
from .ops import BatchNormState, ConvSpec
from .tensor import Tensor, no_record, recording

logger = logging.getLogger(__name__)

DENSE_BLOCKS = 4
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Channel widths and topology switches of the network."""

    base_channels: int = 16
    growth: int = 16
    decoder_channels: int = 32
    dilation_set: Tuple[int, ...] = (1, 2, 3, 4)
    downscale: int = 8
    dropout_rate: float = 0.2
    input_channels: int = 6
    output_mode: str = "depth"
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "dilation_set", tuple(int(l) for l in self.dilation_set))
        errors = []
        for name in ("base_channels", "growth", "decoder_channels"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be positive, got {getattr(self, name)}")
        if not self.dilation_set or min(self.dilation_set) < 1:
            errors.append(f"dilation_set must be non-empty and >= 1, got {self.dilation_set}")
        elif len(set(self.dilation_set)) != len(self.dilation_set):
            errors.append(f"dilation_set has repeated entries: {self.dilation_set}")
        if self.downscale < 2 or self.downscale & (self.downscale - 1):
            errors.append(f"downscale must be a power of 2 >= 2, got {self.downscale}")
        if not 0.0 <= self.dropout_rate < 1.0:
            errors.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.input_channels != 6:
            errors.append(f"input_channels must be 6 (two RGB views), got {self.input_channels}")
        if self.output_mode not in OUTPUT_MODES:
            errors.append(f"output_mode must be one of {OUTPUT_MODES}, got {self.output_mode!r}")
        if self.precision not in PRECISIONS:
            errors.append(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def decoder_steps(self) -> int:
        return int(math.log2(self.downscale))

    @property
    def dtype(self) -> Any:
        return PRECISIONS[self.precision]

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["dilation_set"] = list(self.dilation_set)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        try:
            return cls(**values)
        except TypeError as err:
            raise ConfigError(f"bad model config: {err}") from err


@dataclass
class ConvModule:
    """Convolution (no bias) -> batchnorm -> ReLU."""

    conv: ConvSpec
    norm: BatchNormState

    def __call__(self, x: Tensor, mode: str, update_stats: bool = True) -> Tensor:
        return ops.relu(ops.batchnorm(ops.conv2d(x, self.conv), self.norm, mode, update_stats))

    @property
    def out_channels(self) -> int:
        return self.conv.kernel.shape[0]


@dataclass
class Model:
    """Named parameters of the network plus its config."""

    config: ModelConfig
    modules: Dict[str, ConvModule]
    head: ConvSpec
    seed: int = 0

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors keyed by layer path, in build order."""
        params: Dict[str, Tensor] = {}
        for path, module in self.modules.items():
            params[f"{path}.kernel"] = module.conv.kernel
            params[f"{path}.gamma"] = module.norm.gamma
            params[f"{path}.beta"] = module.norm.beta
        params["head.kernel"] = self.head.kernel
        params["head.bias"] = self.head.bias  # type: ignore[assignment]
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        """Batchnorm running statistics keyed by layer path."""
        buffers: Dict[str, np.ndarray] = {}
        for path, module in self.modules.items():
            buffers[f"{path}.running_mean"] = module.norm.running_mean
            buffers[f"{path}.running_var"] = module.norm.running_var
        return buffers

    def parameter_count(self) -> int:
        return int(sum(tensor.data.size for tensor in self.parameters().values()))

    def state(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer array, in a fixed order."""
        state = {name: tensor.data for name, tensor in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state(self, state: Dict[str, np.ndarray]):
        """Copy arrays into this model; shapes must match exactly."""
        targets: Dict[str, np.ndarray] = {
            name: tensor.data for name, tensor in self.parameters().items()
        }
        targets.update(self.buffers())
        for name, target in targets.items():
            if name not in state:
                raise ShapeError(f"state has no entry for parameter {name}")
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise ShapeError(
                    f"parameter {name} has shape {source.shape}, model expects {target.shape}"
                )
        unknown = sorted(set(state) - set(targets))
        if unknown:
            raise ShapeError(f"state holds unknown parameter {unknown[0]}")
        for name, target in targets.items():
            target[...] = np.asarray(state[name], dtype=target.dtype)


def _conv_module(
    rng: np.random.Generator,
    path: str,
    in_channels: int,
    out_channels: int,
    dtype: Any,
    kernel_size: int = 3,
    dilation: int = 1,
) -> ConvModule:
    fan_in = in_channels * kernel_size * kernel_size
    bound = math.sqrt(6.0 / fan_in)
    kernel = rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size, kernel_size))
    conv = ConvSpec(
        kernel=Tensor(kernel.astype(dtype), requires_grad=True, name=f"{path}.kernel"),
        dilation=dilation,
        padding=ops.same_padding(kernel_size, dilation),
    )
    return ConvModule(conv, BatchNormState.create(out_channels, dtype, name=path))


def build_model(config: ModelConfig, rng_seed: int = 0, smoke_check: bool = True) -> Model:
    """Initialize every layer from one seeded generator, in path order."""
    rng = np.random.default_rng(rng_seed)
    dtype = config.dtype
    base = config.base_channels
    modules: Dict[str, ConvModule] = {}

    modules["stem"] = _conv_module(rng, "stem", config.input_channels, base, dtype)
    for dilation in config.dilation_set:
        path = f"branch.l{dilation}"
        modules[path] = _conv_module(rng, path, base, base, dtype, dilation=dilation)
    channels = base * len(config.dilation_set)
    for index in range(DENSE_BLOCKS):
        path = f"dense.{index}"
        modules[path] = _conv_module(rng, path, channels, config.growth, dtype)
        channels += config.growth
    modules["skip"] = _conv_module(rng, "skip", config.input_channels // 2, base, dtype)
    for step in range(config.decoder_steps):
        path = f"decoder.{step}"
        modules[path] = _conv_module(rng, path, channels + base, config.decoder_channels, dtype)
        channels = config.decoder_channels

    bound = 1.0 / math.sqrt(channels)
    head = ConvSpec(
        kernel=Tensor(
            rng.uniform(-bound, bound, (1, channels, 1, 1)).astype(dtype),
            requires_grad=True,
            name="head.kernel",
        ),
        bias=Tensor(
            rng.uniform(-bound, bound, (1, 1, 1, 1)).astype(dtype),
            requires_grad=True,
            name="head.bias",
        ),
    )
    model = Model(config, modules, head, seed=rng_seed)
    logger.debug("built model with %d parameters", model.parameter_count())

    if smoke_check:
        dead = check_gradient_flow(model, seed=rng_seed)
        if dead:
            raise ContractError(f"parameters receive no gradient: {', '.join(dead)}")
    return model


def dense_block(
    x: Tensor,
    module: ConvModule,
    mode: str,
    dropout_rate: float = 0.0,
    seed: int = 0,
    update_stats: bool = True,
) -> Tensor:
    """``concat(x, dropout(module(x)))``; adds ``module.out_channels`` channels."""
    features = ops.dropout(module(x, mode, update_stats), dropout_rate, mode, seed)
    return ops.concat([x, features])


def _as_input(value: Any, dtype: Any) -> Tensor:
    if isinstance(value, Tensor):
        if value.dtype == dtype:
            return value
        return Tensor(value.data.astype(dtype))
    return Tensor(np.asarray(value, dtype=dtype))


def forward(
    model: Model,
    left: Any,
    right: Any,
    mode: str,
    seed: int = 0,
    update_stats: bool = True,
    dropout: bool = True,
) -> Tensor:
    """Predict the (N, 1, H, W) map in (0, 1) for a batch of image pairs.

    ``seed`` fixes the dropout masks. ``dropout=False`` disables dropout even
    in train mode. Every recorded operation of one call lands in one graph.
    """
    config = model.config
    left = _as_input(left, config.dtype)
    right = _as_input(right, config.dtype)
    if left.shape != right.shape:
        raise ShapeError(f"left {left.shape} and right {right.shape} differ")
    batch, channels, height, width = left.shape
    if channels * 2 != config.input_channels:
        raise ShapeError(f"expected {config.input_channels // 2}-channel views, got {channels}")
    if height % config.downscale or width % config.downscale:
        raise ShapeError(
            f"{height}x{width} is not divisible by the downscale factor {config.downscale}"
        )
    graph = left.graph if left.graph is not None else right.graph
    with recording(graph):
        return _layers(model, left, right, mode, seed, update_stats, dropout)


def _layers(
    model: Model,
    left: Tensor,
    right: Tensor,
    mode: str,
    seed: int,
    update_stats: bool,
    dropout: bool,
) -> Tensor:
    config = model.config
    rate = config.dropout_rate if dropout else 0.0
    modules = model.modules

    x = modules["stem"](ops.concat([left, right]), mode, update_stats)
    x = ops.maxpool(x, config.downscale)
    x = ops.concat(
        [modules[f"branch.l{l}"](x, mode, update_stats) for l in config.dilation_set]
    )
    for index in range(DENSE_BLOCKS):
        x = dense_block(
            x,
            modules[f"dense.{index}"],
            mode,
            rate,
            seed=seed * DENSE_BLOCKS + index,
            update_stats=update_stats,
        )

    skip = modules["skip"](left, mode, update_stats)
    for step in range(config.decoder_steps):
        factor = config.downscale >> (step + 1)
        level = skip if factor == 1 else ops.maxpool(skip, factor)
        x = ops.concat([ops.upsample2x(x), level])
        x = modules[f"decoder.{step}"](x, mode, update_stats)

    return ops.sigmoid(ops.conv2d(x, model.head))


def check_gradient_flow(model: Model, seed: int = 0) -> List[str]:
    """Names of parameters whose gradient is all zero on a random batch.

    Runs in train mode with dropout off and without touching the running
    statistics.
    """
    rng = np.random.default_rng(seed)
    size = 2 * model.config.downscale
    shape = (2, model.config.input_channels // 2, size, size)
    left = rng.random(shape)
    right = rng.random(shape)
    output = forward(model, left, right, "train", update_stats=False, dropout=False)
    weights = Tensor(rng.uniform(0.5, 1.5, output.shape).astype(output.dtype))
    loss = ops.sum(ops.mul(output, weights))
    grads = loss.graph.backward(loss)  # type: ignore[union-attr]
    dead = [name for name in model.parameters() if not np.any(grads.get(name, 0.0))]
    for tensor in model.parameters().values():
        tensor.grad = None
    return dead


def predict(model: Model, left: Any, right: Any) -> np.ndarray:
    """Eval-mode forward pass without a graph; returns (N, 1, H, W) values.

    Reads the model and writes nothing, so concurrent calls are safe.
    """
    with no_record():
        output = forward(model, left, right, "eval")
    return output.numpy()

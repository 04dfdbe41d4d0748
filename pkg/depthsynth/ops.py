"""Layer operations with forward kernels and registered backward rules.

All kernels work on whole NCHW arrays with numpy. An operation records a graph
node only when one of its inputs is already in a graph or requires a
gradient; otherwise it returns a plain tensor. Inside ``no_record`` nothing
is recorded at all.
"""

import builtins
import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    SCALAR_SHAPE,
    Graph,
    Tensor,
    active_graph,
    is_recording,
    register_backward,
)

logger = logging.getLogger(__name__)

MODES = ("train", "eval")
ACTIVATIONS = ("relu", "sigmoid")

Padding = Union[int, Tuple[int, int, int, int]]


def _graph_for(inputs: Sequence[Tensor]) -> Optional[Graph]:
    if not is_recording():
        return None
    graph: Optional[Graph] = None
    for tensor in inputs:
        if tensor.graph is not None:
            if graph is not None and tensor.graph is not graph:
                raise ContractError("inputs are attached to different graphs")
            graph = tensor.graph
    if graph is None and any(tensor.requires_grad for tensor in inputs):
        # an empty Graph is falsy, so no ``or`` here
        graph = active_graph()
        if graph is None:
            graph = Graph()
    return graph


def _emit(tag: str, inputs: Sequence[Tensor], output: np.ndarray, /, **saved: Any) -> Tensor:
    graph = _graph_for(inputs)
    if graph is None:
        return Tensor(output)
    return graph.record(tag, inputs, output, saved)


def _check_mode(mode: str):
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# Elementwise primitives


def identity(x: Tensor) -> Tensor:
    return _emit("identity", [x], np.array(x.data))


@register_backward("identity")
def _identity_backward(grad, saved):
    return (grad,)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit("add", [a, b], a.data + b.data)


@register_backward("add")
def _add_backward(grad, saved):
    return grad, grad


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit("sub", [a, b], a.data - b.data)


@register_backward("sub")
def _sub_backward(grad, saved):
    return grad, -grad


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _emit("mul", [a, b], a.data * b.data, a=a.data, b=b.data)


@register_backward("mul")
def _mul_backward(grad, saved):
    return grad * saved["b"], grad * saved["a"]


def scale(x: Tensor, factor: float) -> Tensor:
    return affine(x, factor, 0.0)


def affine(x: Tensor, factor: float, shift: float) -> Tensor:
    """Elementwise ``factor * x + shift``."""
    output = (factor * x.data + shift).astype(x.dtype, copy=False)
    return _emit("affine", [x], output, factor=factor)


@register_backward("affine")
def _affine_backward(grad, saved):
    return (grad * saved["factor"],)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for non-negative ``x``."""
    output = np.power(x.data, exponent)
    return _emit("power", [x], output, x=x.data, exponent=exponent)


@register_backward("power")
def _power_backward(grad, saved):
    exponent = saved["exponent"]
    return (grad * exponent * np.power(saved["x"], exponent - 1.0),)


def reciprocal(x: Tensor, numerator: float = 1.0) -> Tensor:
    """Elementwise ``numerator / x``."""
    output = (numerator / x.data).astype(x.dtype, copy=False)
    return _emit("reciprocal", [x], output, x=x.data, numerator=numerator)


@register_backward("reciprocal")
def _reciprocal_backward(grad, saved):
    x = saved["x"]
    return (-grad * saved["numerator"] / (x * x),)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to ``[low, high]``; the gradient is zero where clamping applied."""
    if low > high:
        raise ContractError(f"clip bounds reversed: {low} > {high}")
    inside = (x.data >= low) & (x.data <= high)
    output = np.clip(x.data, low, high).astype(x.dtype, copy=False)
    return _emit("clip", [x], output, inside=inside)


@register_backward("clip")
def _clip_backward(grad, saved):
    return (grad * saved["inside"],)


def square(x: Tensor) -> Tensor:
    return _emit("square", [x], x.data * x.data, x=x.data)


@register_backward("square")
def _square_backward(grad, saved):
    return (2.0 * grad * saved["x"],)


def sum(x: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    """Sum of all elements as a (1,1,1,1) double tensor."""
    total = np.sum(x.data, dtype=np.float64)
    return _emit("sum", [x], np.full(SCALAR_SHAPE, total), shape=x.shape)


@register_backward("sum")
def _sum_backward(grad, saved):
    return (np.broadcast_to(grad.reshape(()), saved["shape"]),)


def mean(x: Tensor) -> Tensor:
    """Mean of all elements as a (1,1,1,1) double tensor."""
    if x.data.size == 0:
        raise ContractError("mean of an empty tensor")
    return masked_mean(x, np.ones(x.shape, dtype=bool))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the elements where ``mask`` (broadcast to x) is true."""
    weights = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    count = int(np.count_nonzero(weights))
    if count == 0:
        raise ContractError("masked_mean over an empty mask")
    total = np.sum(x.data, where=weights, dtype=np.float64)
    return _emit(
        "masked_mean",
        [x],
        np.full(SCALAR_SHAPE, total / count),
        weights=weights,
        count=count,
    )


@register_backward("masked_mean")
def _masked_mean_backward(grad, saved):
    return (grad.reshape(()) * saved["weights"] / saved["count"],)


# --------------------------------------------------------------------------
# Activations


def relu(x: Tensor) -> Tensor:
    return _emit("relu", [x], np.maximum(x.data, 0).astype(x.dtype), positive=x.data > 0)


@register_backward("relu")
def _relu_backward(grad, saved):
    return (grad * saved["positive"],)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) for the tensor dtype."""
    data = x.data
    with np.errstate(over="ignore"):
        positive = 1.0 / (1.0 + np.exp(-np.abs(data)))
    output = np.where(data >= 0, positive, 1.0 - positive).astype(x.dtype)
    upper = np.nextafter(np.array(1.0, dtype=x.dtype), np.array(0.0, dtype=x.dtype))
    output = np.clip(output, np.finfo(x.dtype).tiny, upper)
    return _emit("sigmoid", [x], output, output=output)


@register_backward("sigmoid")
def _sigmoid_backward(grad, saved):
    output = saved["output"]
    return (grad * output * (1.0 - output),)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {kind!r}")


# --------------------------------------------------------------------------
# Convolution


def same_padding(kernel_size: int, dilation: int = 1) -> Tuple[int, int, int, int]:
    """Zero padding that keeps the spatial size for an odd kernel at stride 1."""
    if kernel_size % 2 == 0:
        raise ConfigError(f"'same' padding needs an odd kernel, got {kernel_size}")
    half = dilation * (kernel_size - 1) // 2
    return (half, half, half, half)


@dataclass
class ConvSpec:
    """Kernel, optional bias and geometry of one convolution."""

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    dilation: int = 1
    padding: Padding = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be positive, got {self.dilation}")
        if isinstance(self.padding, int):
            self.padding = (self.padding,) * 4
        if len(self.padding) != 4 or any(side < 0 for side in self.padding):
            raise ConfigError(f"padding must be 4 non-negative sides, got {self.padding}")
        out_channels = self.kernel.shape[0]
        if self.bias is not None and self.bias.shape != (1, out_channels, 1, 1):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {out_channels} "
                "output channels"
            )

    def output_extent(self, height: int, width: int) -> Tuple[int, int]:
        """Spatial output size for an input of ``height`` x ``width``."""
        top, bottom, left, right = self.padding  # type: ignore[misc]
        _, _, kernel_h, kernel_w = self.kernel.shape
        reach_h = self.dilation * (kernel_h - 1) + 1
        reach_w = self.dilation * (kernel_w - 1) + 1
        out_h = (height + top + bottom - reach_h) // self.stride + 1
        out_w = (width + left + right - reach_w) // self.stride + 1
        if out_h < 0 or out_w < 0:
            raise ShapeError(
                f"convolution of {height}x{width} with reach {reach_h}x{reach_w} "
                "has a negative output extent"
            )
        return out_h, out_w


def _tap_window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _im2col(padded, kernel_h, kernel_w, dilation, stride, out_h, out_w) -> np.ndarray:
    batch, channels = padded.shape[:2]
    cols = np.empty((batch, channels, out_h, out_w, kernel_h, kernel_w), padded.dtype)
    for row in range(kernel_h):
        rows = _tap_window(row * dilation, stride, out_h)
        for col in range(kernel_w):
            columns = _tap_window(col * dilation, stride, out_w)
            cols[:, :, :, :, row, col] = padded[:, :, rows, columns]
    return cols


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Dilated convolution: ``out(p) = sum over s + l*t = p of F(s) k(t)``."""
    batch, channels, height, width = x.shape
    out_channels, in_channels, kernel_h, kernel_w = spec.kernel.shape
    if channels != in_channels:
        raise ShapeError(f"conv2d expects {in_channels} input channels, got {channels}")
    out_h, out_w = spec.output_extent(height, width)
    top, bottom, left, right = spec.padding  # type: ignore[misc]
    dtype = np.result_type(x.dtype, spec.kernel.dtype)
    padded = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (top, bottom), (left, right)))

    cols = None
    output = np.zeros((batch, out_channels, out_h, out_w), dtype=dtype)
    if output.size and in_channels:
        cols = _im2col(padded, kernel_h, kernel_w, spec.dilation, spec.stride, out_h, out_w)
        product = np.tensordot(cols, spec.kernel.data, axes=([1, 4, 5], [1, 2, 3]))
        output = np.ascontiguousarray(product.transpose(0, 3, 1, 2))
    if spec.bias is not None:
        output = output + spec.bias.data.reshape(1, out_channels, 1, 1)

    inputs = [x, spec.kernel] + ([spec.bias] if spec.bias is not None else [])
    return _emit(
        "conv2d",
        inputs,
        output,
        cols=cols,
        kernel=spec.kernel.data,
        padded_shape=padded.shape,
        padding=spec.padding,
        stride=spec.stride,
        dilation=spec.dilation,
        input_shape=x.shape,
        has_bias=spec.bias is not None,
    )


@register_backward("conv2d")
def _conv2d_backward(grad, saved):
    kernel = saved["kernel"]
    cols = saved["cols"]
    stride, dilation = saved["stride"], saved["dilation"]
    top, _, left, _ = saved["padding"]
    _, _, height, width = saved["input_shape"]
    _, _, out_h, out_w = grad.shape
    _, _, kernel_h, kernel_w = kernel.shape

    grad_padded = np.zeros(saved["padded_shape"], dtype=grad.dtype)
    if cols is None:
        grad_kernel = np.zeros_like(kernel)
    else:
        grad_kernel = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_cols = np.tensordot(grad, kernel, axes=([1], [0]))
        for row in range(kernel_h):
            rows = _tap_window(row * dilation, stride, out_h)
            for col in range(kernel_w):
                columns = _tap_window(col * dilation, stride, out_w)
                grad_padded[:, :, rows, columns] += grad_cols[..., row, col].transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, top : top + height, left : left + width]

    grads = [grad_input, grad_kernel]
    if saved["has_bias"]:
        grads.append(grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
    return grads


# --------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batchnorm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(
        cls,
        channels: int,
        dtype: Any = np.float64,
        name: str = "bn",
        momentum: float = 0.9,
        epsilon: float = 1e-5,
    ) -> "BatchNormState":
        shape = (1, channels, 1, 1)
        return cls(
            gamma=Tensor(np.ones(shape, dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(shape, dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(shape, dtype),
            running_var=np.ones(shape, dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


def batchnorm(
    x: Tensor, state: BatchNormState, mode: str, update_stats: bool = True
) -> Tensor:
    """Per-channel normalization over (batch, H, W)."""
    _check_mode(mode)
    channels = x.shape[1]
    if state.gamma.shape != (1, channels, 1, 1) or state.beta.shape != (1, channels, 1, 1):
        raise ShapeError(
            f"batchnorm has {state.channels} channels, input has {channels}"
        )
    axes = (0, 2, 3)
    if mode == "train":
        if x.data.size == 0:
            raise ShapeError("batchnorm in train mode needs a non-empty batch")
        batch_mean = x.data.mean(axis=axes, keepdims=True)
        batch_var = x.data.var(axis=axes, keepdims=True)
        if update_stats:
            keep = state.momentum
            state.running_mean *= keep
            state.running_mean += (1.0 - keep) * batch_mean
            state.running_var *= keep
            state.running_var += (1.0 - keep) * batch_var
    else:
        batch_mean, batch_var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(batch_var + state.epsilon)
    normalized = (x.data - batch_mean) * inv_std
    output = (state.gamma.data * normalized + state.beta.data).astype(x.dtype, copy=False)
    return _emit(
        "batchnorm",
        [x, state.gamma, state.beta],
        output,
        normalized=normalized,
        inv_std=inv_std,
        gamma=state.gamma.data,
        train=mode == "train",
    )


@register_backward("batchnorm")
def _batchnorm_backward(grad, saved):
    axes = (0, 2, 3)
    normalized = saved["normalized"]
    inv_std = saved["inv_std"]
    grad_beta = grad.sum(axis=axes, keepdims=True)
    grad_gamma = (grad * normalized).sum(axis=axes, keepdims=True)
    grad_normalized = grad * saved["gamma"]
    if saved["train"]:
        count = grad.size // grad.shape[1]
        grad_input = (inv_std / count) * (
            count * grad_normalized
            - grad_normalized.sum(axis=axes, keepdims=True)
            - normalized * (grad_normalized * normalized).sum(axis=axes, keepdims=True)
        )
    else:
        grad_input = grad_normalized * inv_std
    return grad_input, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# Resampling and channel plumbing


def maxpool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` max pooling."""
    if factor < 1:
        raise ConfigError(f"pooling factor must be positive, got {factor}")
    batch, channels, height, width = x.shape
    if height % factor or width % factor:
        raise ShapeError(f"{height}x{width} is not divisible by pooling factor {factor}")
    out_h, out_w = height // factor, width // factor
    windows = (
        x.data.reshape(batch, channels, out_h, factor, out_w, factor)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, out_h, out_w, factor * factor)
    )
    # argmax picks the first maximum in scan order
    winners = windows.argmax(axis=-1)[..., None]
    output = np.take_along_axis(windows, winners, axis=-1)[..., 0]
    return _emit("maxpool", [x], output, winners=winners, factor=factor, shape=x.shape)


@register_backward("maxpool")
def _maxpool_backward(grad, saved):
    factor = saved["factor"]
    batch, channels, height, width = saved["shape"]
    out_h, out_w = height // factor, width // factor
    windows = np.zeros((batch, channels, out_h, out_w, factor * factor), grad.dtype)
    np.put_along_axis(windows, saved["winners"], grad[..., None], axis=-1)
    grad_input = (
        windows.reshape(batch, channels, out_h, out_w, factor, factor)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, height, width)
    )
    return (grad_input,)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along both spatial axes."""
    output = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _emit("upsample2x", [x], output)


@register_backward("upsample2x")
def _upsample2x_backward(grad, saved):
    batch, channels, height, width = grad.shape
    blocks = grad.reshape(batch, channels, height // 2, 2, width // 2, 2)
    return (blocks.sum(axis=(3, 5)),)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis in argument order."""
    if not parts:
        raise ContractError("concat needs at least one tensor")
    batch, _, height, width = parts[0].shape
    for part in parts[1:]:
        if (part.shape[0], part.shape[2], part.shape[3]) != (batch, height, width):
            raise ShapeError(f"concat: {part.shape} does not match {parts[0].shape}")
    sizes = [part.shape[1] for part in parts]
    output = np.concatenate([part.data for part in parts], axis=1)
    return _emit("concat", list(parts), output, sizes=sizes)


@register_backward("concat")
def _concat_backward(grad, saved):
    bounds = np.cumsum(saved["sizes"])[:-1]
    return np.split(grad, bounds, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}, {stop}) outside {x.shape[1]} channels")
    output = np.array(x.data[:, start:stop])
    return _emit("slice_channels", [x], output, start=start, stop=stop, shape=x.shape)


@register_backward("slice_channels")
def _slice_channels_backward(grad, saved):
    grad_input = np.zeros(saved["shape"], dtype=grad.dtype)
    grad_input[:, saved["start"] : saved["stop"]] = grad
    return (grad_input,)


def split(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    """Split along channels into parts of the given sizes (inverse of concat)."""
    if builtins.sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to {x.shape[1]}")
    parts = []
    start = 0
    for size in sizes:
        parts.append(slice_channels(x, start, start + size))
        start += size
    return parts


def dropout(x: Tensor, rate: float, mode: str, seed: int) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _emit("dropout", [x], x.data * mask, mask=mask)


@register_backward("dropout")
def _dropout_backward(grad, saved):
    return (grad * saved["mask"],)


# --------------------------------------------------------------------------
# Horizontal resampling


def warp_rows(image: Tensor, disparity: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Sample ``image`` at column ``i - disparity`` of every row.

    Linear interpolation between the two neighbouring columns. Returns the
    resampled tensor (zero where invalid) and a (N,1,H,W) mask that is true
    where the sample position lies in ``[0, W-1]``. The derivative with
    respect to the disparity is the negated neighbour difference.
    """
    batch, channels, height, width = image.shape
    if disparity.shape != (batch, 1, height, width):
        raise ShapeError(
            f"disparity shape {disparity.shape} does not match image {image.shape}"
        )
    columns = np.arange(width, dtype=np.float64).reshape(1, 1, 1, width)
    position = columns - disparity.data.astype(np.float64)
    valid = (position >= 0.0) & (position <= width - 1)

    if width > 1:
        left = np.clip(np.floor(position), 0, width - 2).astype(np.intp)
        right = left + 1
    else:
        left = np.zeros(position.shape, dtype=np.intp)
        right = left
    fraction = np.where(valid, position - left, 0.0)

    shape = (batch, channels, height, width)
    left_index = np.broadcast_to(left, shape)
    right_index = np.broadcast_to(right, shape)
    left_value = np.take_along_axis(image.data, left_index, axis=3)
    right_value = np.take_along_axis(image.data, right_index, axis=3)
    sampled = (1.0 - fraction) * left_value + fraction * right_value
    output = np.where(valid, sampled, 0.0).astype(image.dtype)
    slope = np.where(valid, right_value - left_value, 0.0)

    warped = _emit(
        "warp_rows",
        [image, disparity],
        output,
        left=left_index,
        right=right_index,
        fraction=fraction,
        valid=valid,
        slope=slope,
        needs_image_grad=image.requires_grad or image.graph is not None,
    )
    return warped, valid


@register_backward("warp_rows")
def _warp_rows_backward(grad, saved):
    valid = saved["valid"]
    grad_disparity = -(grad * saved["slope"]).sum(axis=1, keepdims=True)
    grad_image = None
    if saved["needs_image_grad"]:
        fraction = saved["fraction"]
        live = grad * valid
        grad_image = np.zeros(grad.shape, dtype=np.float64)
        batch, channels, height, _ = grad.shape
        n, c, h = np.meshgrid(
            np.arange(batch), np.arange(channels), np.arange(height), indexing="ij"
        )
        n, c, h = n[..., None], c[..., None], h[..., None]
        np.add.at(grad_image, (n, c, h, saved["left"]), live * (1.0 - fraction))
        np.add.at(grad_image, (n, c, h, saved["right"]), live * fraction)
    return grad_image, grad_disparity

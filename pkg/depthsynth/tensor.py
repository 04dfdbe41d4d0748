"""Dense NCHW tensors with a record-and-replay reverse-mode engine.

Every differentiable operation appends one node to a ``Graph``: its tag, the
node ids of its inputs and whatever forward values its backward rule needs.
``backward`` walks the nodes in reverse insertion order, which is a valid
reverse topological order because a node can only reference earlier nodes.
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ShapeError, UnsupportedOpError

logger = logging.getLogger(__name__)

LEAF = "leaf"
SCALAR_SHAPE = (1, 1, 1, 1)

BackwardRule = Callable[[np.ndarray, Dict[str, Any]], Sequence[Optional[np.ndarray]]]
BACKWARD_RULES: Dict[str, BackwardRule] = {}


def register_backward(tag: str) -> Callable[[BackwardRule], BackwardRule]:
    """Register the backward rule for nodes tagged ``tag``."""

    def decorator(rule: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[tag] = rule
        return rule

    return decorator


class Tensor:
    """A 4-D array, optionally attached to a graph node."""

    __slots__ = ("data", "requires_grad", "name", "graph", "node_id", "grad")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        graph: Optional["Graph"] = None,
        node_id: Optional[int] = None,
    ):
        """Wrap ``data`` without copying it."""
        array = np.asarray(data)
        if array.ndim != 4:
            raise ShapeError(f"Tensor needs 4 extents, got shape {array.shape}")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.graph = graph
        self.node_id = node_id
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        """Return the single value of a scalar-shaped tensor."""
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return np.array(self.data)

    def detach(self) -> "Tensor":
        """Return a graph-free tensor sharing nothing with this one."""
        return Tensor(np.array(self.data), name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def tensor_new(
    shape: Sequence[int],
    values: Any,
    requires_grad: bool = False,
    dtype: Any = np.float64,
    name: Optional[str] = None,
) -> Tensor:
    """Build a tensor owning a row-major copy of ``values``."""
    extents = tuple(int(extent) for extent in shape)
    if len(extents) != 4 or any(extent < 0 for extent in extents):
        raise ShapeError(f"shape must be 4 non-negative extents, got {shape}")
    flat = np.array(values, dtype=dtype).reshape(-1)
    expected = int(np.prod(extents))
    if flat.size != expected:
        raise ShapeError(
            f"{flat.size} values do not fill shape {extents} ({expected} elements)"
        )
    return Tensor(flat.reshape(extents), requires_grad=requires_grad, name=name)


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


@dataclass
class Node:
    """One recorded operation."""

    tag: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    dtype: np.dtype
    saved: Dict[str, Any] = field(default_factory=dict)


class Graph:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        """Initialize an empty graph."""
        self.nodes: List[Node] = []
        self.released = False
        self._leaf_ids: Dict[int, int] = {}
        self._leaves: Dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def node_for(self, tensor: Tensor) -> Optional[int]:
        """Return the node id of ``tensor`` here, registering it as a leaf."""
        if tensor.graph is self:
            return tensor.node_id
        if tensor.graph is not None:
            raise ContractError("tensor is attached to a different graph")
        if not tensor.requires_grad:
            return None
        key = id(tensor)
        if key not in self._leaf_ids:
            node_id = len(self.nodes)
            self.nodes.append(Node(LEAF, (), tensor.shape, tensor.dtype))
            self._leaf_ids[key] = node_id
            self._leaves[node_id] = tensor
        return self._leaf_ids[key]

    def record(
        self,
        tag: str,
        inputs: Sequence[Tensor],
        output: np.ndarray,
        saved: Optional[Dict[str, Any]] = None,
    ) -> Tensor:
        """Append a node computing ``output`` from ``inputs``."""
        if self.released:
            raise ContractError("cannot record into a released graph")
        input_ids = tuple(self.node_for(tensor) for tensor in inputs)
        node_id = len(self.nodes)
        self.nodes.append(
            Node(tag, input_ids, output.shape, output.dtype, dict(saved or {}))
        )
        return Tensor(output, requires_grad=True, graph=self, node_id=node_id)

    def leaf_name(self, node_id: int) -> str:
        tensor = self._leaves[node_id]
        return tensor.name if tensor.name else f"leaf{node_id}"

    def backward(self, loss: Tensor, retain_graph: bool = False) -> Dict[str, np.ndarray]:
        """Differentiate ``loss`` with respect to every leaf of this graph."""
        if loss.graph is not self or loss.node_id is None:
            raise ContractError("loss tensor is not a node of this graph")
        return backward(self, loss.node_id, retain_graph=retain_graph)

    def release(self):
        """Drop saved forward values; the graph can no longer be replayed."""
        for node in self.nodes:
            node.saved = {}
        self.released = True


_ACTIVE_GRAPH: ContextVar[Optional[Graph]] = ContextVar("active_graph", default=None)
_RECORDING: ContextVar[bool] = ContextVar("recording", default=True)


def active_graph() -> Optional[Graph]:
    """The graph that picks up operations on unattached inputs, if any."""
    return _ACTIVE_GRAPH.get()


def is_recording() -> bool:
    return _RECORDING.get()


@contextmanager
def recording(graph: Optional[Graph] = None) -> Iterator[Graph]:
    """Attach every operation on unattached gradient inputs to one graph.

    Without ``graph`` the enclosing active graph is reused, or a new one is
    started. Operations whose inputs already belong to a graph keep using it.
    """
    if graph is None:
        graph = _ACTIVE_GRAPH.get()
    if graph is None:
        graph = Graph()
    token = _ACTIVE_GRAPH.set(graph)
    try:
        yield graph
    finally:
        _ACTIVE_GRAPH.reset(token)


@contextmanager
def no_record() -> Iterator[None]:
    """Run operations as plain array math; nothing is recorded."""
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


def backward(
    graph: Graph, loss_node: int, retain_graph: bool = False
) -> Dict[str, np.ndarray]:
    """Accumulate gradients of a scalar node into every leaf.

    Returns a mapping from leaf name to gradient. Leaves the loss does not
    depend on receive zeros. Gradients reaching a node along several paths
    are summed.
    """
    if graph.released:
        raise ContractError("graph was released by an earlier backward pass")
    if not 0 <= loss_node < len(graph.nodes):
        raise ContractError(f"node {loss_node} is not in the graph")
    loss = graph.nodes[loss_node]
    if tuple(loss.shape) != SCALAR_SHAPE:
        raise ContractError(f"loss must have shape {SCALAR_SHAPE}, got {loss.shape}")

    grads: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    grads[loss_node] = np.ones(loss.shape, dtype=loss.dtype)

    for node_id in range(loss_node, -1, -1):
        grad = grads[node_id]
        node = graph.nodes[node_id]
        if grad is None or node.tag == LEAF:
            continue
        rule = BACKWARD_RULES.get(node.tag)
        if rule is None:
            raise UnsupportedOpError(f"no backward rule registered for '{node.tag}'")
        input_grads = rule(grad, node.saved)
        if len(input_grads) != len(node.inputs):
            raise ContractError(
                f"backward of '{node.tag}' returned {len(input_grads)} gradients "
                f"for {len(node.inputs)} inputs"
            )
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_id is None or input_grad is None:
                continue
            target = graph.nodes[input_id]
            contribution = np.array(input_grad, dtype=target.dtype)
            if contribution.shape != tuple(target.shape):
                raise ContractError(
                    f"'{node.tag}' produced gradient {contribution.shape} for an "
                    f"input of shape {target.shape}"
                )
            if grads[input_id] is None:
                grads[input_id] = contribution
            else:
                grads[input_id] = grads[input_id] + contribution
        grads[node_id] = None

    result: Dict[str, np.ndarray] = {}
    for node_id, tensor in graph._leaves.items():
        grad = grads[node_id]
        if grad is None:
            node = graph.nodes[node_id]
            grad = np.zeros(node.shape, dtype=node.dtype)
        tensor.grad = grad
        result[graph.leaf_name(node_id)] = grad

    if not retain_graph:
        graph.release()
    return result


def grad_check(
    op_under_test: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``op_under_test`` with central differences.

    The op output is projected onto fixed random weights so that every output
    element contributes. Everything runs in double precision. Returns the
    largest ``|analytic - numeric| / max(1, |analytic|, |numeric|)`` over all
    input elements.
    """
    from . import ops  # ops depends on this module

    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    arrays = [np.array(tensor.data, dtype=np.float64) for tensor in inputs]
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise ContractError("grad_check inputs must be finite")

    leaves = [
        Tensor(array.copy(), requires_grad=True, name=f"input{index}")
        for index, array in enumerate(arrays)
    ]
    with recording():
        output = op_under_test(*leaves)
        weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=output.shape)
        projected = ops.sum(ops.mul(output, Tensor(weights)))
    if projected.graph is None:
        raise ContractError("op under test recorded no graph for its inputs")
    analytic = projected.graph.backward(projected)

    def evaluate(values: List[np.ndarray]) -> float:
        with no_record():
            result = op_under_test(*[Tensor(value) for value in values])
        return float(np.sum(result.data * weights, dtype=np.float64))

    worst = 0.0
    for index, array in enumerate(arrays):
        gradient = analytic[f"input{index}"]
        for position in np.ndindex(*array.shape):
            original = array[position]
            array[position] = original + eps
            plus = evaluate(arrays)
            array[position] = original - eps
            minus = evaluate(arrays)
            array[position] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(gradient[position])
            error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
            worst = max(worst, error)
    logger.debug("grad_check max relative error %.3e", worst)
    return worst

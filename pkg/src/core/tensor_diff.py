"""Tensor Diff - Multi-head MLP math with hand-written reverse mode.

Tensors are plain ``numpy.ndarray`` objects (row-major, float64 unless the
caller selects float32). Parameters live in one flat vector whose layout
separates the shared trunk from the per-task output heads.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

Upstream = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


class DimensionMismatchError(ValueError):
    """Raised when array shapes disagree with the architecture.

    Attributes:
        expected: Shape (or size) that was required
        actual: Shape (or size) that was received
    """

    def __init__(self, what: str, expected=None, actual=None):
        self.expected = expected
        self.actual = actual
        detail = f" (expected {expected}, got {actual})" if expected is not None else ""
        super().__init__(f"dimension mismatch: {what}{detail}")


class UnknownHeadError(ValueError):
    """Raised when a task id has no output head."""

    def __init__(self, task):
        self.task = task
        super().__init__(f"unknown head: task {task!r}")


class LabelError(ValueError):
    """Raised when label rows are not one-hot."""

    def __init__(self, detail: str = ""):
        super().__init__("labels must be one-hot" + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class Segment:
    """One contiguous block of the flat parameter vector.

    Attributes:
        name: "trunk.<i>.weight", "head.<key>.bias", ...
        layer: Layer index counted from the input (the head is the last layer)
        kind: "weight" or "bias"
        offset: Start index in the flat vector
        shape: Array shape of the block (weights are (fan_in, fan_out))
        head: Head key for head segments, None for trunk segments
    """
    name: str
    layer: int
    kind: str
    offset: int
    shape: Tuple[int, ...]
    head: Optional[int] = None

    @property
    def length(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)

    @property
    def fan_in(self) -> int:
        return self.shape[0] if self.kind == "weight" else 0

    @property
    def is_trunk(self) -> bool:
        return self.head is None


@dataclass(frozen=True)
class ParamLayout:
    """Ordered, non-overlapping partition of a flat parameter vector."""
    segments: Tuple[Segment, ...]

    @property
    def size(self) -> int:
        if not self.segments:
            return 0
        last = self.segments[-1]
        return last.offset + last.length

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(f"No segment named {name}")

    def trunk_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for seg in self.segments:
            if seg.is_trunk:
                mask[seg.slice] = True
        return mask

    def head_mask(self, key: int) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for seg in self.segments:
            if seg.head == key:
                mask[seg.slice] = True
        return mask

    def layer_segments(self, layer: int, head: Optional[int] = None) -> List[Segment]:
        """Weight and bias segments of one layer (head layer needs its key)."""
        return [s for s in self.segments if s.layer == layer and (s.is_trunk or s.head == head)]

    def to_list(self) -> List[dict]:
        return [
            {"name": s.name, "layer": s.layer, "kind": s.kind, "offset": s.offset,
             "shape": list(s.shape), "head": s.head}
            for s in self.segments
        ]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "ParamLayout":
        return cls(tuple(
            Segment(name=d["name"], layer=d["layer"], kind=d["kind"], offset=d["offset"],
                    shape=tuple(d["shape"]), head=d["head"])
            for d in items
        ))


@dataclass
class MlpArchitecture:
    """Rectifier MLP with a shared trunk and one linear output head per task.

    Attributes:
        input_dim: Size of a flattened input
        hidden_dims: Widths of the hidden (trunk) layers
        heads: Task id -> number of output classes
        shared_head: If True every task uses one common head (single-head mode)
    """
    input_dim: int
    hidden_dims: Tuple[int, ...]
    heads: Dict[int, int]
    shared_head: bool = False
    _layout: Optional[ParamLayout] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.heads = {int(k): int(v) for k, v in self.heads.items()}
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> List[str]:
        """Check architecture invariants.

        Returns:
            List of error messages, empty if valid.
        """
        errors = []
        if self.input_dim < 1:
            errors.append(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_dims:
            errors.append("at least one hidden layer is required")
        if any(h < 1 for h in self.hidden_dims):
            errors.append(f"hidden_dims must be positive, got {list(self.hidden_dims)}")
        if not self.heads:
            errors.append("at least one head is required")
        for task, classes in self.heads.items():
            if classes < 2:
                errors.append(f"head for task {task} needs >= 2 classes, got {classes}")
        if self.shared_head and len(set(self.heads.values())) > 1:
            errors.append("shared head requires the same class count for every task")
        return errors

    def head_key(self, task: int) -> int:
        """Head used by ``task``; all tasks map to key 0 in single-head mode."""
        if task not in self.heads:
            raise UnknownHeadError(task)
        return 0 if self.shared_head else task

    def head_keys(self) -> List[int]:
        return [0] if self.shared_head else sorted(self.heads)

    def num_classes(self, task: int) -> int:
        self.head_key(task)
        return self.heads[task]

    @property
    def layout(self) -> ParamLayout:
        if self._layout is None:
            self._layout = self._build_layout()
        return self._layout

    @property
    def num_params(self) -> int:
        return self.layout.size

    def _build_layout(self) -> ParamLayout:
        segments: List[Segment] = []
        offset = 0
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_dims):
            for kind, shape in (("weight", (fan_in, width)), ("bias", (width,))):
                seg = Segment(f"trunk.{i}.{kind}", i, kind, offset, shape)
                segments.append(seg)
                offset += seg.length
            fan_in = width
        head_layer = len(self.hidden_dims)
        for key in self.head_keys():
            classes = self.heads[key] if not self.shared_head else next(iter(self.heads.values()))
            for kind, shape in (("weight", (fan_in, classes)), ("bias", (classes,))):
                seg = Segment(f"head.{key}.{kind}", head_layer, kind, offset, shape, head=key)
                segments.append(seg)
                offset += seg.length
        return ParamLayout(tuple(segments))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "heads": {str(k): v for k, v in self.heads.items()},
            "shared_head": self.shared_head,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpArchitecture":
        return cls(
            input_dim=data["input_dim"],
            hidden_dims=tuple(data["hidden_dims"]),
            heads={int(k): v for k, v in data["heads"].items()},
            shared_head=data.get("shared_head", False),
        )


@dataclass
class ParamVector:
    """Flat parameter values together with their layout."""
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.size:
            raise DimensionMismatchError("parameter vector", self.layout.size, self.values.shape)

    def view(self, name: str) -> np.ndarray:
        """Reshaped view (no copy) of one named segment."""
        seg = self.layout.segment(name)
        return self.values[seg.slice].reshape(seg.shape)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    @classmethod
    def zeros(cls, layout: ParamLayout, dtype=np.float64) -> "ParamVector":
        return cls(np.zeros(layout.size, dtype=dtype), layout)


def _check_params(params: ParamVector, arch: MlpArchitecture):
    if params.layout != arch.layout:
        raise DimensionMismatchError("parameters do not match architecture",
                                     arch.num_params, params.layout.size)


def _check_input(x: np.ndarray, arch: MlpArchitecture):
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DimensionMismatchError("input batch", ("batch", arch.input_dim), x.shape)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")


def _layers(params: ParamVector, arch: MlpArchitecture, task: int):
    key = arch.head_key(task)
    trunk = [
        (params.view(f"trunk.{i}.weight"), params.view(f"trunk.{i}.bias"))
        for i in range(len(arch.hidden_dims))
    ]
    head = (params.view(f"head.{key}.weight"), params.view(f"head.{key}.bias"))
    return key, trunk, head


def forward(params: ParamVector, arch: MlpArchitecture, x: np.ndarray, task: int) -> np.ndarray:
    """Logits f_theta(x) of the head selected by ``task``.

    Raises:
        UnknownHeadError: If the task has no head
        DimensionMismatchError: If x or params do not fit the architecture
    """
    _check_params(params, arch)
    _check_input(x, arch)
    _, trunk, (w_out, b_out) = _layers(params, arch, task)
    h = x
    for w, b in trunk:
        h = np.maximum(h @ w + b, 0.0)
    return h @ w_out + b_out


def _backprop(
    params: ParamVector,
    arch: MlpArchitecture,
    x: np.ndarray,
    task: int,
    upstream: Upstream,
    need_params: bool = True,
    need_input: bool = False,
) -> Tuple[np.ndarray, Optional[ParamVector], Optional[np.ndarray]]:
    """Forward pass plus reverse sweep of sum(upstream * logits).

    ``upstream`` may be a callable of the logits so loss-specific signals
    (softmax - y) can be formed without a second forward pass.
    """
    _check_params(params, arch)
    _check_input(x, arch)
    key, trunk, (w_out, b_out) = _layers(params, arch, task)

    activations = [x]
    pre_activations = []
    h = x
    for w, b in trunk:
        z = h @ w + b
        pre_activations.append(z)
        h = np.maximum(z, 0.0)
        activations.append(h)
    logits = h @ w_out + b_out

    delta = upstream(logits) if callable(upstream) else upstream
    if delta.shape != logits.shape:
        raise DimensionMismatchError("upstream signal", logits.shape, delta.shape)

    grad = None
    if need_params:
        grad = np.zeros(params.values.shape, dtype=np.result_type(params.values, delta))
        layout = params.layout
        grad[layout.segment(f"head.{key}.weight").slice] = (activations[-1].T @ delta).ravel()
        grad[layout.segment(f"head.{key}.bias").slice] = delta.sum(axis=0)

    delta = delta @ w_out.T
    for i in range(len(trunk) - 1, -1, -1):
        # rectifier subgradient at 0 is 0
        delta = delta * (pre_activations[i] > 0)
        if need_params:
            grad[layout.segment(f"trunk.{i}.weight").slice] = (activations[i].T @ delta).ravel()
            grad[layout.segment(f"trunk.{i}.bias").slice] = delta.sum(axis=0)
        if i > 0 or need_input:
            delta = delta @ trunk[i][0].T

    grad_vec = ParamVector(grad, params.layout) if need_params else None
    return logits, grad_vec, (delta if need_input else None)


def backward_params(
    params: ParamVector,
    arch: MlpArchitecture,
    x: np.ndarray,
    task: int,
    upstream: np.ndarray,
) -> ParamVector:
    """Gradient of sum(upstream * f_theta(x)) with respect to theta.

    The batch contribution is a plain sum. Head segments of tasks other than
    ``task`` are exactly zero.
    """
    _, grad, _ = _backprop(params, arch, x, task, upstream, need_params=True)
    return grad


def forward_backward(
    params: ParamVector,
    arch: MlpArchitecture,
    x: np.ndarray,
    task: int,
    upstream_fn: Callable[[np.ndarray], np.ndarray],
) -> Tuple[np.ndarray, ParamVector]:
    """Logits and parameter gradient in one sweep; upstream is built from the logits."""
    logits, grad, _ = _backprop(params, arch, x, task, upstream_fn, need_params=True)
    return logits, grad


def check_one_hot(y: np.ndarray, classes: Optional[int] = None) -> None:
    """Raise LabelError unless every row of ``y`` is a one-hot vector."""
    if y.ndim != 2:
        raise LabelError(f"expected 2-D labels, got shape {y.shape}")
    if classes is not None and y.shape[1] != classes:
        raise DimensionMismatchError("label width", classes, y.shape[1])
    is_binary = np.all((y == 0) | (y == 1))
    if not is_binary or not np.all(y.sum(axis=1) == 1):
        raise LabelError()


def grad_input(
    params: ParamVector,
    arch: MlpArchitecture,
    x: np.ndarray,
    task: int,
    y: np.ndarray,
) -> np.ndarray:
    """Per-row gradient of y^T f_theta(x) with respect to the input x."""
    check_one_hot(y, arch.num_classes(task))
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatchError("label batch", x.shape[0], y.shape[0])
    _, _, dx = _backprop(params, arch, x, task, y, need_params=False, need_input=True)
    return dx


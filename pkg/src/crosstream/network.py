"""Homologous 3D ConvNet streams with named tap points and bridge adapters.

Both streams share the same topology: per block, conv3d (k=3, same padding),
relu, then maxpool (block 1 pools spatially only so the clip keeps its early
temporal resolution). Tap points Front/Medium/Rear expose the activations
after blocks 1, 2 and 3; Output is the globally pooled pre-logit vector.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Parameter
from .rng import he_normal
from .tensor import ShapeError, Tensor


class TapPoint(Enum):
    FRONT = "front"
    MEDIUM = "medium"
    REAR = "rear"
    OUTPUT = "output"


INTERMEDIATE_TAPS = (TapPoint.FRONT, TapPoint.MEDIUM, TapPoint.REAR)


@dataclass(frozen=True)
class StreamSpec:
    in_channels: int
    num_classes: int
    block_channels: tuple[int, ...] = (8, 16, 32, 64)
    clip_shape: tuple[int, int, int] = (8, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(self.block_channels))
        object.__setattr__(self, "clip_shape", tuple(self.clip_shape))
        if self.in_channels not in (2, 3):
            raise ValueError(f"in_channels must be 2 (flow) or 3 (rgb), got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.block_channels) < 3:
            raise ValueError("need at least 3 blocks to expose Front/Medium/Rear taps")

    @property
    def stream_name(self) -> str:
        return "rgb" if self.in_channels == 3 else "flow"

    def pool_windows(self) -> list[tuple[int, int, int]]:
        return [(1, 2, 2) if i == 0 else (2, 2, 2) for i in range(len(self.block_channels))]

    def block_shapes(self) -> list[tuple[int, int, int, int]]:
        """(C, T, H, W) after each block; raises if pooling underflows."""
        t, h, w = self.clip_shape
        shapes = []
        for channels, win in zip(self.block_channels, self.pool_windows()):
            if t < win[0] or h < win[1] or w < win[2]:
                raise ShapeError(
                    f"pooling underflow: extent ({t},{h},{w}) smaller than window {win}; "
                    f"clip {self.clip_shape} is too small for {len(self.block_channels)} blocks"
                )
            t, h, w = t // win[0], h // win[1], w // win[2]
            shapes.append((channels, t, h, w))
        return shapes

    def tap_shape(self, tap: TapPoint) -> tuple[int, ...]:
        """Per-sample shape at a tap (batch dimension excluded)."""
        shapes = self.block_shapes()
        if tap is TapPoint.OUTPUT:
            return (self.block_channels[-1],)
        return shapes[{TapPoint.FRONT: 0, TapPoint.MEDIUM: 1, TapPoint.REAR: 2}[tap]]


@dataclass
class TapFeatures:
    """All tap activations from one forward pass (views, not recomputation)."""

    front: Tensor
    medium: Tensor
    rear: Tensor
    output: Tensor
    logits: Tensor

    def tap(self, point: TapPoint) -> Tensor:
        return {
            TapPoint.FRONT: self.front,
            TapPoint.MEDIUM: self.medium,
            TapPoint.REAR: self.rear,
            TapPoint.OUTPUT: self.output,
        }[point]


class StreamNetwork:
    """One 3D ConvNet stream; parameters keyed by dotted names."""

    def __init__(self, spec: StreamSpec, params: "OrderedDict[str, Parameter]"):
        self.spec = spec
        self.params = params

    @property
    def name(self) -> str:
        return self.spec.stream_name

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def param(self, suffix: str) -> Parameter:
        return self.params[f"stream.{self.name}.{suffix}"]

    def load_state(self, arrays: "OrderedDict[str, np.ndarray]") -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = arrays[name]
            if arr.shape != p.tensor.data.shape:
                raise ShapeError(
                    f"checkpoint shape {arr.shape} != expected {p.tensor.data.shape} for {name!r}"
                )
            p.tensor.data = np.ascontiguousarray(arr, dtype=np.float32)
            p.tensor.grad = None

    def save(self, path) -> None:
        save_checkpoint(path, self.parameters())

    def set_frozen(self, frozen: bool) -> None:
        for p in self.params.values():
            p.frozen = frozen


def build_stream(spec: StreamSpec, seed: int) -> StreamNetwork:
    """Deterministic construction: identical (spec, seed) gives identical bits."""
    spec.block_shapes()  # validates the pooling schedule up front
    s = spec.stream_name
    params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add_param(name: str, value: np.ndarray) -> None:
        params[name] = Parameter(name, Tensor(value, requires_grad=True))

    cin = spec.in_channels
    for k, cout in enumerate(spec.block_channels, start=1):
        wname = f"stream.{s}.block{k}.conv"
        add_param(wname, he_normal((cout, cin, 3, 3, 3), cin * 27, seed, wname))
        add_param(f"stream.{s}.block{k}.bias", np.zeros(cout, dtype=np.float32))
        cin = cout
    c_last = spec.block_channels[-1]
    wname = f"stream.{s}.classifier.w"
    add_param(wname, he_normal((spec.num_classes, c_last), c_last, seed, wname))
    add_param(f"stream.{s}.classifier.b", np.zeros(spec.num_classes, dtype=np.float32))
    return StreamNetwork(spec, params)


def load_stream(path, spec: StreamSpec, frozen: bool = False) -> StreamNetwork:
    net = build_stream(spec, seed=0)
    net.load_state(load_checkpoint(path))
    net.set_frozen(frozen)
    return net


def forward(net: StreamNetwork, clip: Tensor) -> TapFeatures:
    spec = net.spec
    if clip.data.ndim != 5 or clip.shape[1] != spec.in_channels or clip.shape[2:] != spec.clip_shape:
        raise ShapeError(
            f"clip shape {clip.shape} does not match spec "
            f"(N, {spec.in_channels}, {', '.join(map(str, spec.clip_shape))})"
        )
    x = clip
    taps = []
    for k, win in enumerate(spec.pool_windows(), start=1):
        x = T.conv3d(x, net.param(f"block{k}.conv").tensor, net.param(f"block{k}.bias").tensor,
                     stride=(1, 1, 1), padding=(1, 1, 1))
        x = T.relu(x)
        x = T.maxpool3d(x, win)
        taps.append(x)
    output = T.global_avg_pool(x)
    logits = T.linear(output, net.param("classifier.w").tensor, net.param("classifier.b").tensor)
    return TapFeatures(front=taps[0], medium=taps[1], rear=taps[2], output=output, logits=logits)


def adaptive_avg_pool3d(arr: np.ndarray, out_sizes: tuple[int, int, int]) -> np.ndarray:
    """Mean-pool (N, C, T, H, W) onto the given (T, H, W), torch-style windows."""
    for axis, target in zip((2, 3, 4), out_sizes):
        n_in = arr.shape[axis]
        target = int(target)
        if n_in == target:
            continue
        idx = np.arange(target)
        starts = (idx * n_in) // target
        ends = -(-(idx + 1) * n_in // target)  # ceil division
        cs = np.cumsum(arr, axis=axis, dtype=arr.dtype)
        hi = np.take(cs, ends - 1, axis=axis)
        lo = np.where(
            (starts > 0).reshape([-1 if a == axis else 1 for a in range(arr.ndim)]),
            np.take(cs, np.maximum(starts - 1, 0), axis=axis),
            0.0,
        ).astype(arr.dtype)
        counts = (ends - starts).astype(arr.dtype)
        arr = (hi - lo) / counts.reshape([-1 if a == axis else 1 for a in range(arr.ndim)])
    return arr


@dataclass
class BridgeAdapter:
    """Aligns a teacher tap onto a student tap: fixed average pooling over
    (T, H, W) plus a learned 1x1x1 channel projection. The adapter's weights
    train with the student; the teacher side is always treated as constant."""

    target_shape: tuple[int, int, int, int]  # (C, T, H, W) of the student tap
    weight: Parameter
    bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def build_adapter(teacher_channels: int, student_shape: tuple[int, int, int, int], seed: int) -> BridgeAdapter:
    cs = student_shape[0]
    if cs == teacher_channels:
        w = np.eye(cs, dtype=np.float32)
    else:
        w = he_normal((cs, teacher_channels), teacher_channels, seed, "bridge.adapter.w")
    weight = Parameter("bridge.adapter.w", Tensor(w, requires_grad=True))
    bias = Parameter("bridge.adapter.b", Tensor(np.zeros(cs, dtype=np.float32), requires_grad=True))
    return BridgeAdapter(target_shape=tuple(student_shape), weight=weight, bias=bias)


def adapt(adapter: BridgeAdapter, teacher_feature: Tensor) -> Tensor:
    """Project a (detached) 5-d teacher feature onto the student tap shape."""
    if teacher_feature.data.ndim != 5:
        raise ShapeError(f"adapt expects a 5-d teacher feature, got {teacher_feature.data.ndim}-d")
    cs, ts, hs, ws = adapter.target_shape
    pooled = adaptive_avg_pool3d(teacher_feature.data, (ts, hs, ws))
    n, ct = pooled.shape[:2]
    cols = np.ascontiguousarray(np.moveaxis(pooled, 1, 4)).reshape(n * ts * hs * ws, ct)
    projected = T.linear(Tensor(cols), adapter.weight.tensor, adapter.bias.tensor)
    out = T.reshape(projected, (n, ts, hs, ws, cs))
    return T.moveaxis(out, 4, 1)

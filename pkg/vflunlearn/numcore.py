"""Dense tensor numerics with hand-written backpropagation.

Tensors are plain ``numpy.ndarray`` objects in float64 with a leading batch
axis. A network is an immutable list of :class:`LayerSpec` plus the input
shape of one sample; its parameters live in a single flat vector whose layout
is described by :class:`ParamLayout`.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from vflunlearn.exceptions import ArgumentError, DimensionError, NumericError

Tensor = np.ndarray
ParamVector = np.ndarray

BALL_TOLERANCE = 1e-12

LayerKind = Literal["conv", "maxpool", "relu", "fc", "dropout"]


class LayerSpec(BaseModel):
    """One layer of a network, with the dimensions its kind needs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: LayerKind
    in_channels: Optional[int] = Field(None, gt=0)
    out_channels: Optional[int] = Field(None, gt=0)
    kernel: Optional[int] = Field(None, gt=0)
    stride: int = Field(1, gt=0)
    padding: int = Field(0, ge=0)
    in_features: Optional[int] = Field(None, gt=0)
    out_features: Optional[int] = Field(None, gt=0)
    p: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_dimensions(self):
        required = {
            "conv": ("in_channels", "out_channels", "kernel"),
            "maxpool": ("kernel",),
            "fc": ("in_features", "out_features"),
        }.get(self.kind, ())
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind} layer needs {', '.join(missing)}")
        return self


def conv(
    in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: int = 0
) -> LayerSpec:
    """Square-kernel 2-D convolution over NCHW input."""
    return LayerSpec(
        kind="conv",
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        stride=stride,
        padding=padding,
    )


def maxpool(kernel: int = 2, stride: Optional[int] = None) -> LayerSpec:
    """Max pooling; the stride defaults to the kernel size."""
    return LayerSpec(kind="maxpool", kernel=kernel, stride=stride or kernel)


def relu() -> LayerSpec:
    """Elementwise rectifier."""
    return LayerSpec(kind="relu")


def fc(in_features: int, out_features: int) -> LayerSpec:
    """Fully connected layer; flattens its input first."""
    return LayerSpec(kind="fc", in_features=in_features, out_features=out_features)


def dropout(p: float) -> LayerSpec:
    """Inverted dropout, active only in training mode."""
    return LayerSpec(kind="dropout", p=p)


def _param_shapes(spec: LayerSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    if spec.kind == "conv":
        return [
            ("weight", (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)),
            ("bias", (spec.out_channels,)),
        ]
    if spec.kind == "fc":
        return [
            ("weight", (spec.out_features, spec.in_features)),
            ("bias", (spec.out_features,)),
        ]
    return []


def _fans(spec: LayerSpec) -> Tuple[int, int]:
    if spec.kind == "conv":
        area = spec.kernel * spec.kernel
        return spec.in_channels * area, spec.out_channels * area
    return spec.in_features, spec.out_features


def output_shape(
    layers: Sequence[LayerSpec], input_shape: Tuple[int, ...]
) -> Tuple[int, ...]:
    """Propagate a per-sample shape through ``layers``.

    Raises:
        DimensionError: If a layer cannot accept the shape it receives.
    """
    shape = tuple(input_shape)
    for i, spec in enumerate(layers):
        if spec.kind == "conv":
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise DimensionError(
                    f"layer {i} (conv) expects {spec.in_channels} channels, got shape {shape}"
                )
            h = (shape[1] + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (shape[2] + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise DimensionError(f"layer {i} (conv) kernel larger than input {shape}")
            shape = (spec.out_channels, h, w)
        elif spec.kind == "maxpool":
            if len(shape) != 3:
                raise DimensionError(f"layer {i} (maxpool) expects 3-D input, got {shape}")
            h = (shape[1] - spec.kernel) // spec.stride + 1
            w = (shape[2] - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise DimensionError(f"layer {i} (maxpool) window larger than input {shape}")
            shape = (shape[0], h, w)
        elif spec.kind == "fc":
            if math.prod(shape) != spec.in_features:
                raise DimensionError(
                    f"layer {i} (fc) expects {spec.in_features} inputs, got shape {shape}"
                )
            shape = (spec.out_features,)
    return shape


@dataclass(frozen=True)
class ParamSlot:
    layer: int
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ParamLayout:
    """Ordered layer -> field map over a flat parameter vector.

    Two vectors built for the same layer list are index-aligned, and
    ``flatten(unflatten(v))`` reproduces ``v`` exactly.
    """

    def __init__(self, layers: Sequence[LayerSpec]):
        self.num_layers = len(layers)
        self.slots: List[ParamSlot] = []
        offset = 0
        for i, spec in enumerate(layers):
            for name, shape in _param_shapes(spec):
                slot = ParamSlot(layer=i, name=name, shape=shape, offset=offset)
                self.slots.append(slot)
                offset += slot.size
        self.size = offset

    def unflatten(self, values: ParamVector) -> List[Dict[str, np.ndarray]]:
        if values.shape != (self.size,):
            raise DimensionError(
                f"parameter vector has shape {values.shape}, layout needs ({self.size},)"
            )
        per_layer: List[Dict[str, np.ndarray]] = [{} for _ in range(self.num_layers)]
        for slot in self.slots:
            chunk = values[slot.offset : slot.offset + slot.size]
            per_layer[slot.layer][slot.name] = chunk.reshape(slot.shape)
        return per_layer

    def flatten(self, per_layer: Sequence[Dict[str, np.ndarray]]) -> ParamVector:
        if len(per_layer) != self.num_layers:
            raise DimensionError(
                f"got {len(per_layer)} layers of parameters, layout has {self.num_layers}"
            )
        parts = []
        for slot in self.slots:
            array = per_layer[slot.layer][slot.name]
            if array.shape != slot.shape:
                raise DimensionError(
                    f"layer {slot.layer} {slot.name} has shape {array.shape}, expected {slot.shape}"
                )
            parts.append(np.asarray(array, dtype=np.float64).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True)
class Network:
    """A layer list together with the per-sample input shape it accepts."""

    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        # validates the whole chain eagerly
        _ = self.output_shape

    @cached_property
    def output_shape(self) -> Tuple[int, ...]:
        return output_shape(self.layers, self.input_shape)

    @cached_property
    def layout(self) -> ParamLayout:
        return ParamLayout(self.layers)

    @property
    def num_params(self) -> int:
        return self.layout.size

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        """Draw weights from uniform(-s, s), s = sqrt(6 / (fan_in + fan_out)); zero biases."""
        parts = []
        for slot in self.layout.slots:
            if slot.name == "weight":
                fan_in, fan_out = _fans(self.layers[slot.layer])
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                parts.append(rng.uniform(-bound, bound, size=slot.size))
            else:
                parts.append(np.zeros(slot.size))
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class ActivationCache:
    """Per-layer intermediates recorded by :func:`forward`."""

    layers: Tuple[LayerSpec, ...]
    output_shape: Tuple[int, ...]
    entries: List[object] = field(default_factory=list)


def _conv_forward(spec, w, x, training, rng):
    # strided window view, contracted against the kernel in one einsum
    k, s, p = spec.kernel, spec.stride, spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.einsum("bchwij,ocij->bohw", windows, w["weight"], optimize=True)
    out += w["bias"][None, :, None, None]
    return out, (x.shape, xp.shape, windows)


def _conv_backward(spec, w, cache, g):
    x_shape, xp_shape, windows = cache
    k, s, p = spec.kernel, spec.stride, spec.padding
    grads = {
        "weight": np.einsum("bohw,bchwij->ocij", g, windows, optimize=True),
        "bias": g.sum(axis=(0, 2, 3)),
    }
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                np.einsum("bohw,oc->bchw", g, w["weight"][:, :, i, j], optimize=True)
            )
    if p:
        dxp = dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]]
    return grads, dxp


def _maxpool_forward(spec, w, x, training, rng):
    k, s = spec.kernel, spec.stride
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, c, ho, wo = windows.shape[:4]
    flat = windows.reshape(b, c, ho, wo, k * k)
    # argmax returns the first maximal index, so ties route to the first element
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _maxpool_backward(spec, w, cache, g):
    x_shape, idx = cache
    k, s = spec.kernel, spec.stride
    b, c, ho, wo = idx.shape
    rows = np.arange(ho)[:, None] * s + idx // k
    cols = np.arange(wo) * s + idx % k
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    # overlapping windows can share a cell, so they accumulate with add.at
    dx = np.zeros(x_shape)
    if s >= k:
        dx[bi, ci, rows, cols] = g
    else:
        np.add.at(dx, (bi, ci, rows, cols), g)
    return {}, dx


def _relu_forward(spec, w, x, training, rng):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def _relu_backward(spec, w, mask, g):
    return {}, np.where(mask, g, 0.0)


def _fc_forward(spec, w, x, training, rng):
    flat = x.reshape(x.shape[0], -1)
    return flat @ w["weight"].T + w["bias"], (x.shape, flat)


def _fc_backward(spec, w, cache, g):
    x_shape, flat = cache
    grads = {"weight": g.T @ flat, "bias": g.sum(axis=0)}
    return grads, (g @ w["weight"]).reshape(x_shape)


def _dropout_forward(spec, w, x, training, rng):
    if not training or spec.p == 0.0:
        return x, None
    # inverted dropout: surviving units are rescaled at train time
    mask = (rng.random(x.shape) >= spec.p) / (1.0 - spec.p)
    return x * mask, mask


def _dropout_backward(spec, w, mask, g):
    return {}, g if mask is None else g * mask


_FORWARD = {
    "conv": _conv_forward,
    "maxpool": _maxpool_forward,
    "relu": _relu_forward,
    "fc": _fc_forward,
    "dropout": _dropout_forward,
}

_BACKWARD = {
    "conv": _conv_backward,
    "maxpool": _maxpool_backward,
    "relu": _relu_backward,
    "fc": _fc_backward,
    "dropout": _dropout_backward,
}


def forward(
    net: Network,
    params: ParamVector,
    x: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, ActivationCache]:
    """Run a batch through the network.

    Args:
        net: The network description.
        params: Flat parameter vector laid out per ``net.layout``.
        x: Input batch of shape ``(batch, *net.input_shape)``.
        training: Enables dropout.
        rng: Generator for dropout masks; a fixed default is used if omitted.

    Returns:
        The output batch and the cache needed by :func:`backward`.

    Raises:
        DimensionError: If ``x`` or ``params`` do not fit the network.
        NumericError: If the output contains NaN or Inf.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[1:] != net.input_shape:
        raise DimensionError(
            f"input batch has shape {x.shape}, network expects (batch, *{net.input_shape})"
        )
    weights = net.layout.unflatten(params)
    if training and rng is None:
        rng = np.random.default_rng(0)

    cache = ActivationCache(layers=net.layers, output_shape=())
    for spec, w in zip(net.layers, weights):
        x, entry = _FORWARD[spec.kind](spec, w, x, training, rng)
        cache.entries.append(entry)

    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in network output")
    cache.output_shape = x.shape
    return x, cache


def backward(
    net: Network, params: ParamVector, cache: ActivationCache, upstream_grad: Tensor
) -> Tuple[ParamVector, Tensor]:
    """Backpropagate ``upstream_grad`` through the network.

    Returns:
        Parameter gradients aligned with ``params`` and the gradient with
        respect to the forward input.
    """
    if cache.layers != net.layers or len(cache.entries) != len(net.layers):
        raise DimensionError("activation cache was recorded for a different network")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.output_shape:
        raise DimensionError(
            f"upstream gradient has shape {g.shape}, forward output was {cache.output_shape}"
        )
    weights = net.layout.unflatten(params)
    grads: List[Dict[str, np.ndarray]] = [{} for _ in net.layers]
    for i in reversed(range(len(net.layers))):
        spec = net.layers[i]
        grads[i], g = _BACKWARD[spec.kind](spec, weights[i], cache.entries[i], g)
    return net.layout.flatten(grads), g


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tuple[float, Tensor]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Accepts a single 1-D logit vector with a scalar label, or a batch
    ``(n, num_classes)`` with ``n`` labels. The gradient is that of the
    batch-mean loss, so for one sample it is ``softmax(z) - one_hot(y)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise DimensionError(f"logits {logits.shape} do not match labels {y.shape}")
    n, k = z.shape
    if np.any((y < 0) | (y >= k)):
        raise ArgumentError(f"label out of range [0, {k})")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = np.maximum(log_norm - shifted[rows, y], 0.0)
    loss = float(losses.mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")

    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    grad /= n
    return loss, grad[0] if single else grad


def _check_aligned(a: ParamVector, b: ParamVector):
    if a.shape != b.shape:
        raise DimensionError(f"parameter vectors not aligned: {a.shape} vs {b.shape}")


def sgd_step(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    _check_aligned(params, grads)
    return params - lr * grads


def ascent_step(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    _check_aligned(params, grads)
    return params + lr * grads


def _norm(v: ParamVector) -> float:
    # scaled so finite vectors beyond ~1e154 do not overflow the sum of squares
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    return scale * float(np.linalg.norm(v / scale))


def l2_distance(a: ParamVector, b: ParamVector) -> float:
    _check_aligned(a, b)
    return _norm(a - b)


def project_to_ball(p: ParamVector, center: ParamVector, radius: float) -> ParamVector:
    """Euclidean projection of ``p`` onto the ball ``{z : ||z - center|| <= radius}``.

    Points already inside (up to ``BALL_TOLERANCE``) are returned unchanged,
    which also makes the projection idempotent.
    """
    if radius <= 0:
        raise ArgumentError("radius must be positive")
    _check_aligned(p, center)
    offset = p - center
    dist = _norm(offset)
    if dist <= radius + BALL_TOLERANCE:
        return p.copy()
    scale = float(np.max(np.abs(offset)))
    direction = offset / scale
    return center + direction * (radius / float(np.linalg.norm(direction)))

"""Deterministic forward-pass engine for small CNNs with bit-flip injection.

Every layer's output tensor is a feature map; its scalar entries are the
attackable elements, addressed by (layer index, flat row-major index).
An injection plan flips bits in a layer's output immediately after the
layer computes it, before the next layer consumes it. All tensors are
float32; the loss is evaluated in float64 from the float32 logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .bits import check_bit, flip_in_array

LOSS_CAP = 1.0e6


class ElementAddr(NamedTuple):
    layer: int
    index: int


class ShapeError(ValueError):
    pass


class PlanError(ValueError):
    pass


def _prod(shape) -> int:
    return int(np.prod(shape, dtype=np.int64)) if len(shape) else 1


def _as_chw(shape) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeError(f"expected a (channels, height, width) shape, got {shape}")
    return tuple(int(d) for d in shape)


@dataclass(frozen=True)
class Conv2D:
    in_shape: tuple[int, int, int]
    out_channels: int
    kernel: tuple[int, int]
    stride: int
    padding: int
    weights: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)

    kind = "conv2d"

    def __post_init__(self):
        c, h, w = _as_chw(self.in_shape)
        kh, kw = self.kernel
        if kh <= 0 or kw <= 0 or self.stride <= 0:
            raise ShapeError("kernel and stride must be strictly positive")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")
        if self.weights.shape != (self.out_channels, c, kh, kw):
            raise ShapeError(
                f"conv weights shape {self.weights.shape} != "
                f"{(self.out_channels, c, kh, kw)}"
            )
        if self.bias.shape != (self.out_channels,):
            raise ShapeError("conv bias shape mismatch")
        oh, ow = self.out_shape[1:]
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv output collapses to {self.out_shape}")

    @property
    def out_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_shape
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return (self.out_channels, oh, ow)

    @property
    def ops_per_element(self) -> int:
        c = self.in_shape[0]
        kh, kw = self.kernel
        return c * kh * kw

    def _gather(self):
        # one-time im2col gather indices into the padded input, cached
        cached = getattr(self, "_cache", None)
        if cached is not None:
            return cached
        c, h, w = self.in_shape
        p, s = self.padding, self.stride
        kh, kw = self.kernel
        hp, wp = h + 2 * p, w + 2 * p
        _, oh, ow = self.out_shape
        base = np.arange(c)[:, None, None] * (hp * wp)
        ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
        kern = (base + ky[None] * wp + kx[None]).reshape(c * kh * kw)
        oy, ox = np.meshgrid(np.arange(oh) * s, np.arange(ow) * s, indexing="ij")
        origin = (oy * wp + ox).reshape(oh * ow)
        idx = kern[:, None] + origin[None, :]
        w_mat = np.ascontiguousarray(self.weights.reshape(self.out_channels, -1))
        cache = (idx, w_mat, (hp, wp))
        object.__setattr__(self, "_cache", cache)
        return cache

    def apply(self, x: np.ndarray) -> np.ndarray:
        idx, w_mat, (hp, wp) = self._gather()
        p = self.padding
        if p:
            xp = np.zeros((self.in_shape[0], hp, wp), dtype=np.float32)
            xp[:, p:-p, p:-p] = x
        else:
            xp = x
        col = xp.reshape(-1)[idx]
        out = w_mat @ col
        out += self.bias[:, None]
        return np.ascontiguousarray(out.reshape(self.out_shape), dtype=np.float32)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    kind = "dense"

    def __post_init__(self):
        if self.weights.shape != (self.out_features, self.in_features):
            raise ShapeError(
                f"dense weights shape {self.weights.shape} != "
                f"{(self.out_features, self.in_features)}"
            )
        if self.bias.shape != (self.out_features,):
            raise ShapeError("dense bias shape mismatch")

    @property
    def in_shape(self) -> tuple[int]:
        return (self.in_features,)

    @property
    def out_shape(self) -> tuple[int]:
        return (self.out_features,)

    @property
    def ops_per_element(self) -> int:
        return self.in_features

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self.weights @ x + self.bias, dtype=np.float32)


@dataclass(frozen=True)
class ReLU:
    in_shape: tuple[int, ...]

    kind = "relu"

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    @property
    def ops_per_element(self) -> int:
        return 1

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, np.float32(0.0))


def _pool_out(shape, window, stride):
    c, h, w = shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("pool window larger than input")
    return (c, oh, ow)


@dataclass(frozen=True)
class MaxPool:
    in_shape: tuple[int, int, int]
    window: int
    stride: int

    kind = "maxpool"

    def __post_init__(self):
        if self.window <= 0 or self.stride <= 0:
            raise ShapeError("pool window and stride must be strictly positive")
        _pool_out(_as_chw(self.in_shape), self.window, self.stride)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return _pool_out(self.in_shape, self.window, self.stride)

    @property
    def ops_per_element(self) -> int:
        return self.window * self.window

    def apply(self, x: np.ndarray) -> np.ndarray:
        col = x.reshape(-1)[_pool_gather(self)]
        return np.ascontiguousarray(
            col.max(axis=0).reshape(self.out_shape), dtype=np.float32
        )


@dataclass(frozen=True)
class AvgPool:
    in_shape: tuple[int, int, int]
    window: int
    stride: int

    kind = "avgpool"

    def __post_init__(self):
        if self.window <= 0 or self.stride <= 0:
            raise ShapeError("pool window and stride must be strictly positive")
        _pool_out(_as_chw(self.in_shape), self.window, self.stride)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return _pool_out(self.in_shape, self.window, self.stride)

    @property
    def ops_per_element(self) -> int:
        return self.window * self.window

    def apply(self, x: np.ndarray) -> np.ndarray:
        col = x.reshape(-1)[_pool_gather(self)]
        return np.ascontiguousarray(
            col.mean(axis=0, dtype=np.float32).reshape(self.out_shape)
        )


def _pool_gather(layer) -> np.ndarray:
    """Gather indices (window*window, out_elements) for a pooling layer."""
    cached = getattr(layer, "_cache", None)
    if cached is not None:
        return cached
    c, h, w = layer.in_shape
    win, s = layer.window, layer.stride
    _, oh, ow = layer.out_shape
    base = np.arange(c)[:, None, None] * (h * w)
    ky, kx = np.meshgrid(np.arange(win), np.arange(win), indexing="ij")
    kern = (ky * w + kx).reshape(-1)
    oy, ox = np.meshgrid(np.arange(oh) * s, np.arange(ow) * s, indexing="ij")
    origin = (base + (oy * w + ox)[None]).reshape(-1)
    idx = kern[:, None] + origin[None, :]
    object.__setattr__(layer, "_cache", idx)
    return idx


@dataclass(frozen=True)
class Flatten:
    in_shape: tuple[int, ...]

    kind = "flatten"

    @property
    def out_shape(self) -> tuple[int]:
        return (_prod(self.in_shape),)

    @property
    def ops_per_element(self) -> int:
        return 1

    def apply(self, x: np.ndarray) -> np.ndarray:
        # copy: a reshape view would alias the previous layer's output,
        # letting a flip here corrupt an already-recorded feature map
        return x.reshape(-1).copy()


@dataclass(frozen=True)
class Softmax:
    in_shape: tuple[int]

    kind = "softmax"

    @property
    def out_shape(self) -> tuple[int]:
        return self.in_shape

    @property
    def ops_per_element(self) -> int:
        return 3

    def apply(self, x: np.ndarray) -> np.ndarray:
        e = np.exp(x - x.max())
        return np.ascontiguousarray(e / e.sum(), dtype=np.float32)


Layer = Conv2D | Dense | ReLU | MaxPool | AvgPool | Flatten | Softmax

LAYER_KINDS = {
    cls.kind: cls for cls in (Conv2D, Dense, ReLU, MaxPool, AvgPool, Flatten, Softmax)
}


@dataclass(frozen=True)
class Model:
    """A layer-sequence CNN with weights; the victim of the attack."""

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    output_shapes: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        shapes = []
        prev = tuple(int(d) for d in self.input_shape)
        for i, layer in enumerate(self.layers):
            if tuple(layer.in_shape) != prev:
                raise ShapeError(
                    f"layer {i} ({layer.kind}) declares input shape "
                    f"{tuple(layer.in_shape)} but receives {prev}"
                )
            prev = tuple(layer.out_shape)
            shapes.append(prev)
        if len(shapes[-1]) != 1:
            raise ShapeError("final layer output must be one-dimensional")
        object.__setattr__(self, "output_shapes", tuple(shapes))

    @property
    def class_count(self) -> int:
        return self.output_shapes[-1][0]

    @property
    def element_counts(self) -> tuple[int, ...]:
        return tuple(_prod(s) for s in self.output_shapes)

    @property
    def element_count(self) -> int:
        return sum(self.element_counts)


def enumerate_elements(model: Model) -> list[ElementAddr]:
    """Every feature-map element, once, in (layer asc, index asc) order."""
    return [
        ElementAddr(j, k)
        for j, n in enumerate(model.element_counts)
        for k in range(n)
    ]


def check_addr(model: Model, addr: ElementAddr) -> ElementAddr:
    j, k = int(addr[0]), int(addr[1])
    if not 0 <= j < len(model.layers):
        raise PlanError(f"layer index {j} outside model with {len(model.layers)} layers")
    if not 0 <= k < model.element_counts[j]:
        raise PlanError(
            f"element index {k} outside layer {j} with "
            f"{model.element_counts[j]} elements"
        )
    return ElementAddr(j, k)


def make_plan(
    model: Model, entries: list[tuple[ElementAddr, int]]
) -> tuple[tuple[ElementAddr, int], ...]:
    """Validate an injection plan: in-range addresses, no duplicate (addr, bit).

    A duplicate pair would cancel itself by involution and is rejected.
    """
    seen = set()
    plan = []
    for addr, loc in entries:
        addr = check_addr(model, addr)
        loc = check_bit(loc)
        if (addr, loc) in seen:
            raise PlanError(f"duplicate flip at {addr} bit {loc} would cancel itself")
        seen.add((addr, loc))
        plan.append((addr, loc))
    return tuple(plan)


def loss_vector(logits: np.ndarray) -> np.ndarray:
    """Cross-entropy of softmax(logits) against every class, float64.

    Values are clamped to [0, LOSS_CAP]; NaN anywhere, or any +inf that is
    not a unique +inf (which gives that class loss 0), yields the cap.
    """
    with np.errstate(all="ignore"):
        z = np.asarray(logits, dtype=np.float64).reshape(-1)
        m = z.max()  # NaN/+inf anywhere surfaces here: max propagates both
        if np.isfinite(m):
            lse = m + math.log(np.exp(z - m).sum())
            return np.clip(lse - z, 0.0, LOSS_CAP)
        out = np.full(z.size, LOSS_CAP)
        if np.isnan(z).any():
            return out
        pos = np.isposinf(z)
        if pos.sum() == 1:
            out[np.argmax(pos)] = 0.0
        return out


def loss(logits: np.ndarray, label: int) -> float:
    """Cross-entropy of softmax(logits) at the true class index."""
    n = np.asarray(logits).reshape(-1).size
    if not 0 <= label < n:
        raise ValueError(f"label {label} outside [0, {n})")
    return float(loss_vector(logits)[label])


def final_loss_vector(model: Model, final_output: np.ndarray) -> np.ndarray:
    """Per-class loss from the final layer output, float64.

    If the model ends in an explicit Softmax the output already holds class
    probabilities and the loss is -log(p) directly; otherwise softmax is
    applied via loss_vector. forward() takes its scalar loss from this.
    """
    if model.layers[-1].kind == "softmax":
        with np.errstate(all="ignore"):
            p = np.asarray(final_output, dtype=np.float64).reshape(-1)
            out = np.full(p.size, LOSS_CAP)
            ok = np.isfinite(p) & (p > 0.0)
            out[ok] = np.clip(-np.log(p[ok]), 0.0, LOSS_CAP)
        return out
    return loss_vector(final_output)


INVALID_CLASS = -1


def predict(final_output: np.ndarray) -> int:
    """Argmax with NaN treated as -inf; lowest index wins exact ties.

    When no logit is comparable (every entry NaN or -inf) the output carries
    no class evidence at all and INVALID_CLASS (-1) is reported; it never
    matches any true label."""
    with np.errstate(all="ignore"):
        z = np.asarray(final_output, dtype=np.float64).reshape(-1)
        z = np.where(np.isnan(z), -np.inf, z)
        if z.max() == -np.inf:
            return INVALID_CLASS
        return int(np.argmax(z))


@dataclass(frozen=True)
class InferenceTrace:
    logits: np.ndarray
    predicted_class: int
    loss_value: float
    feature_maps: tuple[np.ndarray, ...] | None = None


def run_layers(
    model: Model,
    x: np.ndarray,
    plan: tuple[tuple[ElementAddr, int], ...] = (),
) -> list[np.ndarray]:
    """Run all layers, applying plan flips to each layer output as produced."""
    by_layer: dict[int, list[tuple[int, int]]] = {}
    for addr, loc in plan:
        by_layer.setdefault(addr.layer, []).append((addr.index, loc))
    outputs = []
    t = x
    with np.errstate(all="ignore"):  # faults overflow by design
        for j, layer in enumerate(model.layers):
            t = layer.apply(t)
            for k, loc in by_layer.get(j, ()):
                flip_in_array(t, k, loc)
            outputs.append(t)
    return outputs


def resume_layers(model: Model, replaced: np.ndarray, start: int) -> np.ndarray:
    """Recompute layers start+1..end from a replacement of layer start's output.

    Bit-identical to a full pass whose prefix produced ``replaced``.
    """
    t = replaced
    with np.errstate(all="ignore"):
        for layer in model.layers[start + 1 :]:
            t = layer.apply(t)
    return t


def forward(
    model: Model,
    x: np.ndarray,
    label: int,
    plan: list[tuple[ElementAddr, int]] | tuple = (),
    keep_feature_maps: bool = False,
) -> InferenceTrace:
    """Forward pass with optional mid-inference bit flips.

    With an empty plan this is bit-identical to an uninjected pass. The
    trace's logits are the final layer's output; if the final layer is an
    explicit Softmax the loss is -log of its (possibly faulted) output at
    the label, otherwise softmax is applied internally.
    """
    x = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    want = _prod(model.input_shape)
    if x.size != want:
        raise ShapeError(
            f"input has {x.size} values, model expects {want} {model.input_shape}"
        )
    x = x.reshape(model.input_shape)
    plan = make_plan(model, list(plan))
    outputs = run_layers(model, x, plan)
    final = outputs[-1]
    if not 0 <= label < model.class_count:
        raise ValueError(f"label {label} outside [0, {model.class_count})")
    loss_value = float(final_loss_vector(model, final)[label])
    return InferenceTrace(
        logits=final,
        predicted_class=predict(final),
        loss_value=loss_value,
        feature_maps=tuple(outputs) if keep_feature_maps else None,
    )

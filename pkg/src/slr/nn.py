"""Dense NHWC tensor ops and the frozen backbone.

All convolutions are cross-correlations (no kernel flip). Each output element
is a single float32 running sum, accumulated tap by tap in (kh, kw, cin)
order, so results do not depend on batch composition or thread count.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64

KINDS = ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "relu6", "global_avg_pool", "flatten")
PARAMETRIC = ("conv2d", "depthwise_conv2d", "pointwise_conv2d")
PADDINGS = ("same", "valid")


class ShapeError(ValueError):
    pass


class WeightError(ValueError):
    pass


# --------------------------------------------------------------------------
# shape algebra


def out_extent(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < kernel:
            raise ShapeError(f"valid padding needs input {size} >= kernel {kernel}")
        return (size - kernel) // stride + 1
    raise ShapeError(f"unknown padding {padding!r}")


def pad_amounts(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    """(before, after) zero padding; odd totals put the extra row/col after."""
    if padding == "valid":
        return 0, 0
    out = out_extent(size, kernel, stride, padding)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC input, got shape {x.shape}")
    return x, False


def _pad_input(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    _, h, w, _ = x.shape
    oh = out_extent(h, kh, stride, padding)
    ow = out_extent(w, kw, stride, padding)
    top, bottom = pad_amounts(h, kh, stride, padding)
    left, right = pad_amounts(w, kw, stride, padding)
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    return x, oh, ow


def _tap(xp: np.ndarray, i: int, j: int, stride: int, oh: int, ow: int) -> np.ndarray:
    return xp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :]


# --------------------------------------------------------------------------
# layer ops


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Standard convolution. ``kernel`` is Kh x Kw x Cin x Cout."""
    xb, single = _batched(x)
    kernel = np.asarray(kernel, dtype=np.float32)
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got shape {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if xb.shape[3] != cin:
        raise ShapeError(f"input has {xb.shape[3]} channels, kernel expects {cin}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    xp, oh, ow = _pad_input(xb, kh, kw, stride, padding)
    out = np.zeros((xb.shape[0], oh, ow, cout), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = _tap(xp, i, j, stride, oh, ow)
            for c in range(cin):
                out += patch[..., c : c + 1] * kernel[i, j, c]
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
        out += bias
    return out[0] if single else out


def depthwise_conv2d(x, kernel, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Per-channel spatial convolution. ``kernel`` is Kh x Kw x C."""
    xb, single = _batched(x)
    kernel = np.asarray(kernel, dtype=np.float32)
    if kernel.ndim != 3:
        raise ShapeError(f"depthwise kernel must be 3-D, got shape {kernel.shape}")
    kh, kw, c = kernel.shape
    if xb.shape[3] != c:
        raise ShapeError(f"input has {xb.shape[3]} channels, depthwise kernel has {c}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    xp, oh, ow = _pad_input(xb, kh, kw, stride, padding)
    out = np.zeros((xb.shape[0], oh, ow, c), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, stride, oh, ow) * kernel[i, j]
    return out[0] if single else out


def pointwise_conv2d(x, kernel, bias=None) -> np.ndarray:
    """1x1 convolution; ``kernel`` is 1 x 1 x Cin x Cout."""
    kernel = np.asarray(kernel, dtype=np.float32)
    if kernel.ndim != 4 or kernel.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise kernel must be 1x1xCinxCout, got shape {kernel.shape}")
    return conv2d(x, kernel, bias, stride=1, padding="valid")


def relu6(x) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(x, dtype=np.float32), np.float32(0)), np.float32(6))


def global_avg_pool(x) -> np.ndarray:
    xb, single = _batched(x)
    n, h, w, c = xb.shape
    acc = np.zeros((n, c), dtype=np.float32)
    for i in range(h):
        for j in range(w):
            acc += xb[:, i, j, :]
    out = (acc / np.float32(h * w)).reshape(n, 1, 1, c)
    return out[0] if single else out


# --------------------------------------------------------------------------
# backbone description


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: str = "same"
    out_channels: int | None = None
    bias: bool = False
    # fixed layers keep out_channels regardless of the width multiplier
    fixed: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(f"{self.kind}: stride and kernel extents must be >= 1")
        if self.padding not in PADDINGS:
            raise ValueError(f"{self.kind}: unknown padding {self.padding!r}")
        if self.kind in ("conv2d", "pointwise_conv2d"):
            if self.out_channels is None or self.out_channels < 1:
                raise ValueError(f"{self.kind}: out_channels must be >= 1")
        if self.kind == "pointwise_conv2d" and (self.kernel_h, self.kernel_w, self.stride) != (1, 1, 1):
            raise ValueError("pointwise_conv2d is always 1x1 with stride 1")
        if self.kind == "depthwise_conv2d" and self.bias:
            raise ValueError("depthwise_conv2d takes no bias")

    def to_text(self) -> str:
        parts = [self.kind]
        if self.kind in ("conv2d", "depthwise_conv2d"):
            if self.kernel_h == self.kernel_w:
                parts.append(f"k={self.kernel_h}")
            else:
                parts.append(f"kh={self.kernel_h} kw={self.kernel_w}")
            parts.append(f"s={self.stride} pad={self.padding}")
        if self.out_channels is not None:
            parts.append(f"out={self.out_channels}")
        if self.bias:
            parts.append("bias=1")
        if self.fixed:
            parts.append("fixed=1")
        return " ".join(parts)

    @classmethod
    def from_text(cls, line: str) -> "LayerSpec":
        kind, *tokens = line.split()
        kw: dict = {}
        for tok in tokens:
            key, _, value = tok.partition("=")
            if key == "k":
                kw["kernel_h"] = kw["kernel_w"] = int(value)
            elif key == "kh":
                kw["kernel_h"] = int(value)
            elif key == "kw":
                kw["kernel_w"] = int(value)
            elif key == "s":
                kw["stride"] = int(value)
            elif key == "pad":
                kw["padding"] = value
            elif key == "out":
                kw["out_channels"] = int(value)
            elif key in ("bias", "fixed"):
                kw[key] = value not in ("0", "false")
            else:
                raise ValueError(f"unknown layer attribute {key!r} in {line!r}")
        return cls(kind, **kw)


def scale_channels(channels: int, alpha: float) -> int:
    return max(1, math.floor(channels * alpha + 0.5))


@dataclass(frozen=True)
class LayerShape:
    """A layer with its resolved input/output shapes and weight shapes."""

    index: int
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel_shape: tuple[int, ...] | None
    bias_shape: tuple[int, ...] | None


@dataclass(frozen=True)
class BackboneSpec:
    input_h: int
    input_w: int
    input_c: int
    layers: tuple[LayerSpec, ...]
    width_multiplier: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must lie in (0, 1]")
        if min(self.input_h, self.input_w, self.input_c) < 1:
            raise ValueError("input extents must be >= 1")
        if not self.layers or self.layers[-1].kind != "flatten":
            raise ValueError("a backbone must end with a flatten layer")
        self.shapes()  # validates the whole stack

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.input_h, self.input_w, self.input_c

    def shapes(self) -> list[LayerShape]:
        shape: tuple[int, ...] = self.input_shape
        result = []
        for idx, layer in enumerate(self.layers):
            if len(shape) != 3:
                raise ShapeError(f"layer {idx} ({layer.kind}) follows flatten")
            h, w, c = shape
            kernel = bias = None
            if layer.kind == "conv2d":
                cout = self._channels(layer)
                kernel = (layer.kernel_h, layer.kernel_w, c, cout)
                out = (
                    out_extent(h, layer.kernel_h, layer.stride, layer.padding),
                    out_extent(w, layer.kernel_w, layer.stride, layer.padding),
                    cout,
                )
            elif layer.kind == "depthwise_conv2d":
                kernel = (layer.kernel_h, layer.kernel_w, c)
                out = (
                    out_extent(h, layer.kernel_h, layer.stride, layer.padding),
                    out_extent(w, layer.kernel_w, layer.stride, layer.padding),
                    c,
                )
            elif layer.kind == "pointwise_conv2d":
                cout = self._channels(layer)
                kernel = (1, 1, c, cout)
                out = (h, w, cout)
            elif layer.kind == "relu6":
                out = shape
            elif layer.kind == "global_avg_pool":
                out = (1, 1, c)
            else:
                out = (h * w * c,)
            if kernel is not None and layer.bias:
                bias = (kernel[-1],)
            result.append(LayerShape(idx, layer, shape, out, kernel, bias))
            shape = out
        return result

    def _channels(self, layer: LayerSpec) -> int:
        if layer.fixed:
            return layer.out_channels
        return scale_channels(layer.out_channels, self.width_multiplier)

    @property
    def bottleneck_dim(self) -> int:
        return self.shapes()[-1].out_shape[0]

    def to_text(self) -> str:
        head = f"input h={self.input_h} w={self.input_w} c={self.input_c} alpha={self.width_multiplier!r}"
        return "\n".join([head] + [layer.to_text() for layer in self.layers]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BackboneSpec":
        lines = [ln.strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if not lines or not lines[0].startswith("input "):
            raise ValueError("backbone text must start with an 'input' line")
        attrs = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
        return cls(
            int(attrs["h"]),
            int(attrs["w"]),
            int(attrs["c"]),
            tuple(LayerSpec.from_text(ln) for ln in lines[1:]),
            float(attrs.get("alpha", 1.0)),
        )


def flatten_spec(h: int = 28, w: int = 28, c: int = 1) -> BackboneSpec:
    """Identity backbone: the bottleneck is the normalized image itself."""
    return BackboneSpec(h, w, c, (LayerSpec("flatten"),))


def desk_spec() -> BackboneSpec:
    """Small MobileNet-shaped stack for 28x28x1 inputs (bottleneck dim 64)."""
    return BackboneSpec(
        28, 28, 1,
        (
            LayerSpec("conv2d", 3, 3, 2, "same", 16, bias=True),
            LayerSpec("relu6"),
            LayerSpec("depthwise_conv2d", 3, 3, 1, "same"),
            LayerSpec("relu6"),
            LayerSpec("pointwise_conv2d", out_channels=32, bias=True),
            LayerSpec("relu6"),
            LayerSpec("depthwise_conv2d", 3, 3, 2, "same"),
            LayerSpec("relu6"),
            LayerSpec("pointwise_conv2d", out_channels=64, bias=True),
            LayerSpec("relu6"),
            LayerSpec("global_avg_pool"),
            LayerSpec("flatten"),
        ),
    )


def mobilenet_v1_spec(alpha: float = 0.5, resolution: int = 224, classes: int = 1001) -> BackboneSpec:
    """MobileNet v1 with folded batch norm, ending in the ``classes``-wide logit layer.

    The 1001-wide output is what a retrained head consumes as its bottleneck.
    """
    blocks = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)]
    blocks += [(512, 1)] * 5 + [(1024, 2), (1024, 1)]
    layers = [LayerSpec("conv2d", 3, 3, 2, "same", 32, bias=True), LayerSpec("relu6")]
    for out, stride in blocks:
        layers += [
            LayerSpec("depthwise_conv2d", 3, 3, stride, "same"),
            LayerSpec("relu6"),
            LayerSpec("pointwise_conv2d", out_channels=out, bias=True),
            LayerSpec("relu6"),
        ]
    layers += [
        LayerSpec("global_avg_pool"),
        LayerSpec("pointwise_conv2d", out_channels=classes, bias=True, fixed=True),
        LayerSpec("flatten"),
    ]
    return BackboneSpec(resolution, resolution, 3, tuple(layers), alpha)


# --------------------------------------------------------------------------
# weights


@dataclass
class WeightSet:
    kernels: dict[int, np.ndarray] = field(default_factory=dict)
    biases: dict[int, np.ndarray] = field(default_factory=dict)

    def element_count(self) -> int:
        return sum(k.size for k in self.kernels.values()) + sum(b.size for b in self.biases.values())


def validate_weights(spec: BackboneSpec, weights: WeightSet) -> None:
    for ls in spec.shapes():
        if ls.kernel_shape is None:
            continue
        name = f"layer {ls.index} ({ls.spec.kind})"
        kernel = weights.kernels.get(ls.index)
        if kernel is None:
            raise WeightError(f"{name}: missing kernel")
        if tuple(kernel.shape) != ls.kernel_shape:
            raise WeightError(f"{name}: kernel shape {tuple(kernel.shape)} != expected {ls.kernel_shape}")
        bias = weights.biases.get(ls.index)
        if ls.bias_shape is not None:
            if bias is None:
                raise WeightError(f"{name}: missing bias")
            if tuple(bias.shape) != ls.bias_shape:
                raise WeightError(f"{name}: bias shape {tuple(bias.shape)} != expected {ls.bias_shape}")
        elif bias is not None:
            raise WeightError(f"{name}: unexpected bias")


def param_count(spec: BackboneSpec) -> int:
    total = 0
    for ls in spec.shapes():
        if ls.kernel_shape is not None:
            total += math.prod(ls.kernel_shape)
        if ls.bias_shape is not None:
            total += math.prod(ls.bias_shape)
    return total


def fan_in(ls: LayerShape) -> int:
    kh, kw = ls.kernel_shape[:2]
    if ls.spec.kind == "depthwise_conv2d":
        return kh * kw
    return kh * kw * ls.kernel_shape[2]


def init_weights(spec: BackboneSpec, seed: int) -> WeightSet:
    """He-normal kernels (variance 2/fan_in) and zero biases, layer by layer."""
    rng = SplitMix64(seed)
    weights = WeightSet()
    for ls in spec.shapes():
        if ls.kernel_shape is None:
            continue
        n = math.prod(ls.kernel_shape)
        std = math.sqrt(2.0 / fan_in(ls))
        weights.kernels[ls.index] = (rng.normal_array(n) * std).astype(np.float32).reshape(ls.kernel_shape)
        if ls.bias_shape is not None:
            weights.biases[ls.index] = np.zeros(ls.bias_shape, dtype=np.float32)
    return weights


def fingerprint(spec: BackboneSpec, weights: WeightSet, scheme: str = "") -> bytes:
    """SHA-256 over the spec text, every weight tensor, and the input normalization."""
    h = hashlib.sha256(spec.to_text().encode())
    for idx in sorted(weights.kernels):
        h.update(f"k{idx}".encode())
        h.update(np.ascontiguousarray(weights.kernels[idx], dtype="<f4").tobytes())
        if idx in weights.biases:
            h.update(f"b{idx}".encode())
            h.update(np.ascontiguousarray(weights.biases[idx], dtype="<f4").tobytes())
    h.update(scheme.encode())
    return h.digest()


# --------------------------------------------------------------------------
# inference


def forward_batch(spec: BackboneSpec, weights: WeightSet, images: np.ndarray) -> np.ndarray:
    """Bottlenecks for an N x H x W x C batch; returns N x D float32."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"expected batch of {spec.input_shape} images, got shape {x.shape}")
    validate_weights(spec, weights)
    for ls in spec.shapes():
        layer = ls.spec
        if layer.kind == "conv2d":
            x = conv2d(x, weights.kernels[ls.index], weights.biases.get(ls.index), layer.stride, layer.padding)
        elif layer.kind == "depthwise_conv2d":
            x = depthwise_conv2d(x, weights.kernels[ls.index], layer.stride, layer.padding)
        elif layer.kind == "pointwise_conv2d":
            x = pointwise_conv2d(x, weights.kernels[ls.index], weights.biases.get(ls.index))
        elif layer.kind == "relu6":
            x = relu6(x)
        elif layer.kind == "global_avg_pool":
            x = global_avg_pool(x)
        else:
            x = x.reshape(x.shape[0], -1)
    return x


def forward(spec: BackboneSpec, weights: WeightSet, image: np.ndarray) -> np.ndarray:
    """Bottleneck vector of length ``spec.bottleneck_dim`` for one H x W x C image."""
    image = np.asarray(image, dtype=np.float32)
    return forward_batch(spec, weights, image[None])[0]

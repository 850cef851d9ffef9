"""Post-training 8-bit affine quantization and model-size accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .head import SoftmaxHead

QMAX = 255


@dataclass(frozen=True)
class QuantizedTensor:
    shape: tuple[int, ...]
    codes: np.ndarray  # uint8, flat
    scale: float  # always exactly representable as float32
    zero_point: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.codes.dtype != np.uint8 or self.codes.size != math.prod(self.shape):
            raise ValueError("codes must be uint8 with one entry per element")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.zero_point <= QMAX:
            raise ValueError("zero_point must lie in [0, 255]")

    @property
    def nbytes(self) -> int:
        return self.codes.size


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(tensor) -> QuantizedTensor:
    """Per-tensor affine quantization over a range widened to include zero.

    The stored scale is the float32 value just at or above (hi - lo)/255, so
    every source value stays within half a step of its reconstruction. The
    zero point is derived from the unrounded scale.
    """
    x = np.asarray(tensor, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    lo = min(float(x.min()), 0.0)
    hi = max(float(x.max()), 0.0)
    if hi == lo:
        exact_scale = 1.0
    else:
        exact_scale = (hi - lo) / QMAX
    scale = np.float32(exact_scale)
    if float(scale) < exact_scale:
        scale = np.nextafter(scale, np.float32(np.inf))
    scale = float(scale)
    zero_point = 0 if hi == lo else int(np.clip(round_half_away(np.float64(-lo * QMAX / (hi - lo))), 0, QMAX))
    codes = np.clip(round_half_away(x / scale) + zero_point, 0, QMAX).astype(np.uint8)
    return QuantizedTensor(x.shape, codes.reshape(-1), scale, zero_point)


def dequantize_codes(codes: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    return (np.float64(scale) * (codes.astype(np.float64) - zero_point)).astype(np.float32)


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    return dequantize_codes(q.codes, q.scale, q.zero_point).reshape(q.shape)


@dataclass(frozen=True)
class QuantizedHead:
    weights: QuantizedTensor
    biases: QuantizedTensor
    label_names: tuple[str, ...]

    def dequantize(self) -> SoftmaxHead:
        return SoftmaxHead(dequantize_tensor(self.weights), dequantize_tensor(self.biases), self.label_names)

    def param_count(self) -> int:
        return self.weights.codes.size + self.biases.codes.size

    def payload_bytes(self) -> int:
        return self.weights.nbytes + self.biases.nbytes


def quantize_head(head: SoftmaxHead) -> QuantizedHead:
    return QuantizedHead(quantize_tensor(head.weights), quantize_tensor(head.biases), head.label_names)


def real32_payload_bytes(head: SoftmaxHead) -> int:
    return 4 * head.param_count()


@dataclass(frozen=True)
class SizeEstimate:
    param_count: int
    bits_per_param: int
    total_bytes: int


def model_size_estimate(param_count: int, bits_per_param: int = 32) -> SizeEstimate:
    """Bytes needed for ``param_count`` constants; 32 bits gives the 4*M rule."""
    if param_count < 0:
        raise ValueError("param_count must be non-negative")
    if bits_per_param not in (8, 32):
        raise ValueError("bits_per_param must be 8 or 32")
    return SizeEstimate(param_count, bits_per_param, -(-param_count * bits_per_param // 8))


def size_reduction(original: SizeEstimate, reduced: SizeEstimate) -> float:
    """Fractional size saving, e.g. 0.75 for 32-bit -> 8-bit."""
    if original.total_bytes == 0:
        return 0.0
    return 1.0 - reduced.total_bytes / original.total_bytes


def save_head(path, head: SoftmaxHead | QuantizedHead, **meta) -> None:
    """Persist a real32 or quant8 head (plus metadata) as ``.npz``."""
    if isinstance(head, SoftmaxHead):
        head.save(path, **meta)
        return
    arrays = {"label_names": np.array(head.label_names)}
    for part in ("weights", "biases"):
        q: QuantizedTensor = getattr(head, part)
        arrays[f"{part}_codes"] = q.codes.reshape(q.shape)
        arrays[f"{part}_scale"] = np.array(q.scale)
        arrays[f"{part}_zero_point"] = np.array(q.zero_point)
    arrays.update({f"meta_{k}": np.array(v) for k, v in meta.items()})
    np.savez(path, **arrays)


def load_head(path) -> tuple[SoftmaxHead | QuantizedHead, dict]:
    with np.load(path) as data:
        meta = {k[5:]: data[k].item() for k in data.files if k.startswith("meta_")}
        names = tuple(str(s) for s in data["label_names"])
        if "weights_codes" not in data.files:
            return SoftmaxHead(data["weights"], data["biases"], names), meta
        parts = []
        for part in ("weights", "biases"):
            codes = data[f"{part}_codes"]
            parts.append(
                QuantizedTensor(
                    codes.shape,
                    codes.reshape(-1).astype(np.uint8),
                    float(data[f"{part}_scale"]),
                    int(data[f"{part}_zero_point"]),
                )
            )
        return QuantizedHead(parts[0], parts[1], names), meta

"""FLOPs accounting, frame-rate extrapolation, latency timing and reports."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .nn import BackboneSpec

# A modern phone sustains roughly 10 GFLOP/s.
PHONE_FLOPS_PER_SECOND = 10e9


@dataclass(frozen=True)
class LayerFlops:
    name: str
    macs: int
    flops: int


@dataclass
class FlopsBreakdown:
    layers: list[LayerFlops] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(layer) for layer in self.layers],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
        }


def flops(spec: BackboneSpec, n_labels: int | None = None) -> FlopsBreakdown:
    """Per-layer operation counts for one inference, two FLOPs per MAC.

    Bias adds cost one FLOP per output element, relu6 and average pooling
    one per input element; flatten is free. With ``n_labels`` the softmax
    head (2*D*N + N) is appended.
    """
    out = FlopsBreakdown()
    for ls in spec.shapes():
        layer = ls.spec
        name = f"{ls.index}:{layer.kind}"
        h, w, c = ls.in_shape if len(ls.in_shape) == 3 else (1, 1, ls.in_shape[0])
        macs = extra = 0
        if layer.kind in ("conv2d", "pointwise_conv2d"):
            kh, kw, cin, cout = ls.kernel_shape
            oh, ow, _ = ls.out_shape
            macs = kh * kw * cin * cout * oh * ow
            if layer.bias:
                extra = oh * ow * cout
        elif layer.kind == "depthwise_conv2d":
            kh, kw, _ = ls.kernel_shape
            oh, ow, _ = ls.out_shape
            macs = kh * kw * c * oh * ow
        elif layer.kind in ("relu6", "global_avg_pool"):
            extra = h * w * c
        out.layers.append(LayerFlops(name, macs, 2 * macs + extra))
    if n_labels is not None:
        d = spec.bottleneck_dim
        out.layers.append(LayerFlops("head", d * n_labels, 2 * d * n_labels + n_labels))
    return out


def fps_estimate(model_flops: float, device_flops_per_second: float = PHONE_FLOPS_PER_SECOND) -> float:
    """Frames per second if the device spends its whole budget on the model."""
    if model_flops <= 0 or device_flops_per_second <= 0:
        raise ValueError("model FLOPs and device throughput must be positive")
    return float(Fraction(device_flops_per_second) / Fraction(model_flops))


@dataclass(frozen=True)
class LatencyStats:
    samples: int
    mean_ms: float
    median_ms: float
    p95_ms: float

    @classmethod
    def from_samples(cls, times_ms: list[float]) -> "LatencyStats":
        if not times_ms:
            raise ValueError("no latency samples")
        ordered = sorted(times_ms)
        # nearest-rank percentile
        p95 = ordered[max(math.ceil(0.95 * len(ordered)), 1) - 1]
        return cls(len(ordered), statistics.fmean(ordered), statistics.median(ordered), p95)


def measure_latency(model, images: np.ndarray, warmup: int = 5, samples: int = 50, k: int = 3) -> tuple[LatencyStats, list]:
    """Time single-image inference (bottleneck + head + top-k).

    ``images`` are raw uint8 pixel rows, cycled as needed. Returns the stats
    and the predictions of the timed runs.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    images = np.atleast_2d(np.asarray(images))
    for i in range(warmup):
        model.predict_topk(images[i % len(images)], k)
    times, predictions = [], []
    for i in range(samples):
        start = time.perf_counter()
        pred = model.predict_topk(images[i % len(images)], k)
        times.append((time.perf_counter() - start) * 1000.0)
        predictions.append(pred)
    return LatencyStats.from_samples(times), predictions


def measure_load_time(loader, path, repeats: int = 5) -> float:
    """Median wall time in milliseconds of ``loader(path)``."""
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        model = loader(path)
        times.append((time.perf_counter() - start) * 1000.0)
        del model
    return statistics.median(times)


def summary_row(model_name: str, params: int, retrain_seconds: float, val_accuracy: float) -> dict:
    """One row of the model comparison table."""
    return {
        "model": model_name,
        "parameters_millions": params / 1e6,
        "time_to_retrain_min": retrain_seconds / 60.0,
        "accuracy": val_accuracy,
    }


def emit_report(
    metrics,
    flops_breakdown: FlopsBreakdown | None = None,
    latency: LatencyStats | None = None,
    sizes: dict | None = None,
    *,
    model_name: str = "model",
    params: int | None = None,
    retrain_seconds: float | None = None,
    extra: dict | None = None,
) -> dict:
    """Assemble the machine-readable report for a training/benchmark run."""
    records = [asdict(r) for r in metrics.records]
    final = metrics.final
    report = {
        "metrics": records,
        "final": {
            "train_accuracy": final.train_acc,
            "val_accuracy": final.val_acc,
            "train_cross_entropy": final.train_xent,
            "val_cross_entropy": final.val_xent,
        },
        "flops": flops_breakdown.to_dict() if flops_breakdown else None,
        "latency": asdict(latency) if latency else None,
        "sizes": sizes or {},
        "summary": summary_row(model_name, params or 0, retrain_seconds or 0.0, final.val_acc),
    }
    if extra:
        report.update(extra)
    return report


def report_text(report: dict) -> str:
    s = report["summary"]
    lines = [
        f"model: {s['model']}",
        f"parameters: {s['parameters_millions']:.4f} M",
        f"time to retrain: {s['time_to_retrain_min']:.2f} min",
        f"final train accuracy: {report['final']['train_accuracy']:.4f}",
        f"final val accuracy: {report['final']['val_accuracy']:.4f}",
    ]
    if report.get("flops"):
        lines.append(f"flops per inference: {report['flops']['total_flops']}")
    if report.get("latency"):
        lat = report["latency"]
        lines.append(f"latency ms: mean {lat['mean_ms']:.3f} median {lat['median_ms']:.3f} p95 {lat['p95_ms']:.3f}")
    for key, value in report.get("sizes", {}).items():
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, json_path: str | Path, text_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=2, allow_nan=True) + "\n")
    if text_path is not None:
        Path(text_path).write_text(report_text(report))

"""End-to-end retraining workflow shared by the CLI and the test suite."""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, SplitManifest, split
from .head import (
    BottleneckCache,
    MetricsSeries,
    SoftmaxHead,
    TrainConfig,
    compute_bottlenecks,
    evaluate,
    read_cache_fingerprint,
    train_head,
)
from .nn import BackboneSpec, WeightSet, desk_spec, fingerprint, flatten_spec, init_weights

log = logging.getLogger(__name__)

BACKBONES = {"flatten": flatten_spec, "desk": desk_spec}
CACHE_ENV = "SLR_CACHE_DIR"


@dataclass
class PipelineConfig:
    """Where things live and how to train; defaults follow the published retraining recipe."""

    dataset_csv: Path | None = None
    cache_dir: Path | None = None
    container: Path | None = None
    report: Path | None = None
    backbone: str = "flatten"
    normalization: str = "signed"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)


def resolve_backbone(choice: str) -> BackboneSpec:
    """``flatten``, ``desk``, or a path to a backbone text file."""
    if choice in BACKBONES:
        return BACKBONES[choice]()
    path = Path(choice)
    if not path.is_file():
        raise FileNotFoundError(f"backbone {choice!r} is neither a built-in name nor a spec file")
    return BackboneSpec.from_text(path.read_text())


def dataset_digest(dataset: Dataset) -> str:
    h = hashlib.sha256(np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(dataset.pixels).tobytes())
    return h.hexdigest()


def cache_directory(default: Path | None) -> Path | None:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else default


def cached_bottlenecks(
    spec: BackboneSpec,
    weights: WeightSet,
    dataset: Dataset,
    scheme: str,
    cache_dir: Path | None,
    workers: int = 1,
) -> tuple[BottleneckCache, bool]:
    """Bottlenecks for the whole dataset, reusing a cache file when it matches.

    Returns the cache and whether it was reused.
    """
    if cache_dir is None:
        return compute_bottlenecks(spec, weights, dataset, scheme=scheme, workers=workers), False
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"bottlenecks-{dataset_digest(dataset)[:16]}.bnck"
    fp = fingerprint(spec, weights, scheme)
    if path.exists():
        stored = read_cache_fingerprint(path)
        if stored == fp:
            cache = BottleneckCache.load(path)
            if len(cache) == len(dataset):
                return cache, True
        log.warning("bottleneck cache %s is stale (backbone fingerprint changed); recomputing", path)
    cache = compute_bottlenecks(spec, weights, dataset, scheme=scheme, workers=workers)
    cache.save(path)
    return cache, False


@dataclass
class TrainResult:
    spec: BackboneSpec
    weights: WeightSet
    manifest: SplitManifest
    head: SoftmaxHead
    metrics: MetricsSeries
    test_accuracy: float
    test_xent: float
    retrain_seconds: float
    cache_reused: bool


def run_training(
    dataset: Dataset,
    spec: BackboneSpec,
    config: TrainConfig,
    seed: int,
    scheme: str = "signed",
    cache_dir: Path | None = None,
    workers: int = 1,
) -> TrainResult:
    """split -> bottlenecks -> train head -> evaluate on the test split."""
    manifest = split(dataset, seed)
    weights = init_weights(spec, seed)
    start = time.perf_counter()
    cache, reused = cached_bottlenecks(spec, weights, dataset, scheme, cache_dir, workers)
    labels = dataset.class_indices
    tr, va, te = manifest.train_ids, manifest.val_ids, manifest.test_ids
    head, metrics = train_head(
        cache.select(tr), labels[tr], cache.select(va), labels[va], config, dataset.label_names
    )
    retrain_seconds = time.perf_counter() - start
    test_acc, test_xent = evaluate(head, cache.select(te), labels[te]) if len(te) else (float("nan"),) * 2
    return TrainResult(spec, weights, manifest, head, metrics, test_acc, test_xent, retrain_seconds, reused)

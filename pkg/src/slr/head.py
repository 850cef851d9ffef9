"""Bottleneck caching and softmax-head retraining on frozen features."""

from __future__ import annotations

import csv
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import IMAGE_SIDE, Dataset, normalize
from .nn import BackboneSpec, WeightSet, fingerprint, forward_batch
from .rng import SplitMix64

CACHE_MAGIC = b"BNCK"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII32s")
PROB_FLOOR = 1e-12


class CacheConsistencyError(ValueError):
    pass


# --------------------------------------------------------------------------
# bottleneck cache


@dataclass
class BottleneckCache:
    dim: int
    fingerprint: bytes
    ids: np.ndarray = None  # (count,) int64
    vectors: np.ndarray = None  # (count, dim) float32

    def __post_init__(self) -> None:
        if self.ids is None:
            self.ids = np.zeros(0, dtype=np.int64)
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dim), dtype=np.float32)
        if self.vectors.shape != (len(self.ids), self.dim):
            raise ValueError(f"vectors shape {self.vectors.shape} does not match {len(self.ids)} x {self.dim}")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, image_id: int) -> np.ndarray:
        pos = np.flatnonzero(self.ids == image_id)
        if not len(pos):
            raise KeyError(image_id)
        return self.vectors[pos[0]]

    def select(self, ids) -> np.ndarray:
        """Vectors for ``ids`` in the given order."""
        ids = np.asarray(ids, dtype=np.int64)
        order = np.argsort(self.ids, kind="stable")
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = np.clip(pos, 0, max(len(self.ids) - 1, 0))
        found = order[pos] if len(self.ids) else pos
        if len(ids) and (not len(self.ids) or not np.array_equal(self.ids[found], ids)):
            raise KeyError("some ids are not in the cache")
        return self.vectors[found]

    def merge(self, other: "BottleneckCache") -> "BottleneckCache":
        if other.fingerprint != self.fingerprint or other.dim != self.dim:
            raise CacheConsistencyError("cannot merge caches built from different backbones")
        return BottleneckCache(
            self.dim,
            self.fingerprint,
            np.concatenate([self.ids, other.ids]),
            np.concatenate([self.vectors, other.vectors]),
        )

    def save(self, path: str | Path) -> None:
        records = np.empty(len(self.ids), dtype=_record_dtype(self.dim))
        records["id"] = self.ids
        records["vec"] = self.vectors
        with open(path, "wb") as fh:
            fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, self.dim, len(self.ids), self.fingerprint))
            fh.write(records.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "BottleneckCache":
        raw = Path(path).read_bytes()
        if len(raw) < _CACHE_HEADER.size:
            raise CacheConsistencyError(f"{path}: truncated header")
        magic, version, dim, count, fp = _CACHE_HEADER.unpack_from(raw)
        if magic != CACHE_MAGIC or version != CACHE_VERSION:
            raise CacheConsistencyError(f"{path}: not a version-{CACHE_VERSION} bottleneck cache")
        dtype = _record_dtype(dim)
        if len(raw) != _CACHE_HEADER.size + count * dtype.itemsize:
            raise CacheConsistencyError(f"{path}: size does not match {count} records of dim {dim}")
        records = np.frombuffer(raw, dtype=dtype, count=count, offset=_CACHE_HEADER.size)
        return cls(dim, fp, records["id"].astype(np.int64), records["vec"].astype(np.float32))


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u4"), ("vec", "<f4", (dim,))])


def read_cache_fingerprint(path: str | Path) -> bytes | None:
    try:
        with open(path, "rb") as fh:
            magic, version, _, _, fp = _CACHE_HEADER.unpack(fh.read(_CACHE_HEADER.size))
    except (OSError, struct.error):
        return None
    return fp if magic == CACHE_MAGIC else None


def compute_bottlenecks(
    spec: BackboneSpec,
    weights: WeightSet,
    dataset: Dataset,
    ids=None,
    scheme: str = "signed",
    workers: int = 1,
    chunk: int = 512,
) -> BottleneckCache:
    """Run the frozen backbone over ``ids`` (all images by default).

    With ``workers > 1`` the ids are cut into contiguous shards whose caches
    are merged in shard order; every vector is computed independently, so the
    result matches a single-threaded run bit for bit.
    """
    ids = np.arange(len(dataset), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() >= len(dataset)):
        raise IndexError("bottleneck ids out of range")
    fp = fingerprint(spec, weights, scheme)

    def run(shard: np.ndarray) -> BottleneckCache:
        out = np.empty((len(shard), spec.bottleneck_dim), dtype=np.float32)
        for start in range(0, len(shard), chunk):
            sel = shard[start : start + chunk]
            images = normalize(dataset.pixels[sel], scheme).reshape(-1, IMAGE_SIDE, IMAGE_SIDE, 1)
            out[start : start + len(sel)] = forward_batch(spec, weights, images)
        return BottleneckCache(spec.bottleneck_dim, fp, shard.copy(), out)

    if workers <= 1 or len(ids) < 2:
        return run(ids)
    shards = np.array_split(ids, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, shards))
    result = parts[0]
    for part in parts[1:]:
        result = result.merge(part)
    return result


# --------------------------------------------------------------------------
# softmax head


def head_param_count(n_labels: int, bottleneck_dim: int) -> int:
    if n_labels < 1 or bottleneck_dim < 1:
        raise ValueError("n_labels and bottleneck_dim must be >= 1")
    return n_labels + bottleneck_dim * n_labels


@dataclass
class SoftmaxHead:
    weights: np.ndarray  # D x N
    biases: np.ndarray  # N
    label_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.label_names = tuple(self.label_names)
        d, n = self.weights.shape
        if self.biases.shape != (n,) or len(self.label_names) != n:
            raise ValueError("head weights, biases and label names disagree on N")

    @classmethod
    def zeros(cls, dim: int, label_names) -> "SoftmaxHead":
        n = len(label_names)
        return cls(np.zeros((dim, n)), np.zeros(n), tuple(label_names))

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_labels(self) -> int:
        return self.weights.shape[1]

    def param_count(self) -> int:
        return self.weights.size + self.biases.size

    def logits(self, bottlenecks: np.ndarray) -> np.ndarray:
        x = np.asarray(bottlenecks, dtype=np.float64)
        return x @ np.asarray(self.weights, dtype=np.float64) + np.asarray(self.biases, dtype=np.float64)

    def probabilities(self, bottlenecks: np.ndarray) -> np.ndarray:
        return softmax(self.logits(bottlenecks))

    def save(self, path: str | Path, **meta) -> None:
        np.savez(
            path,
            weights=self.weights,
            biases=self.biases,
            label_names=np.array(self.label_names),
            **{f"meta_{k}": np.array(v) for k, v in meta.items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["SoftmaxHead", dict]:
        with np.load(path) as data:
            head = cls(data["weights"], data["biases"], tuple(str(s) for s in data["label_names"]))
            meta = {k[5:]: data[k].item() for k in data.files if k.startswith("meta_")}
        return head, meta


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probabilities: np.ndarray, true_label: int) -> float:
    return float(-np.log(max(float(probabilities[true_label]), PROB_FLOOR)))


def _mean_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def mean_loss(head: SoftmaxHead, bottlenecks: np.ndarray, labels: np.ndarray) -> float:
    return _mean_cross_entropy(head.probabilities(bottlenecks), np.asarray(labels))


def head_gradient(head: SoftmaxHead, bottlenecks: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Batch-mean gradient of softmax cross-entropy w.r.t. (weights, biases)."""
    x = np.asarray(bottlenecks, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("gradient of an empty batch")
    delta = head.probabilities(x)
    delta[np.arange(len(labels)), labels] -= 1.0
    delta /= len(labels)
    return x.T @ delta, delta.sum(axis=0)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    steps: int = 5000
    batch_size: int = 100
    eval_interval: int = 10
    val_batch_size: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1 or self.eval_interval < 1 or self.val_batch_size < 1:
            raise ValueError("batch_size, eval_interval and val_batch_size must be positive")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    train_acc: float
    val_acc: float
    train_xent: float
    val_xent: float
    final: bool = False


@dataclass
class MetricsSeries:
    records: list[MetricsRecord] = field(default_factory=list)

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]

    @property
    def final_train_acc(self) -> float:
        return self.final.train_acc

    @property
    def final_val_acc(self) -> float:
        return self.final.val_acc

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "train_acc", "val_acc", "train_xent", "val_xent"])
        for r in self.records:
            writer.writerow([r.step, repr(r.train_acc), repr(r.val_acc), repr(r.train_xent), repr(r.val_xent)])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _batch_stats(head: SoftmaxHead, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    probs = head.probabilities(x)
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return acc, _mean_cross_entropy(probs, y)


def evaluate(head: SoftmaxHead, bottlenecks: np.ndarray, labels) -> tuple[float, float]:
    """(accuracy, mean cross-entropy); argmax ties go to the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if len(labels) != len(bottlenecks):
        raise ValueError("labels are not aligned with bottlenecks")
    return _batch_stats(head, bottlenecks, labels)


def batch_schedule(n_train: int, n_val: int, config: TrainConfig):
    """Yield ``(step, batch_positions, val_positions)`` for every SGD step.

    Both index sets come from one SplitMix64 stream seeded with
    ``config.seed``; ``val_positions`` is None except on evaluation steps,
    where it is drawn right after that step's batch.
    """
    rng = SplitMix64(config.seed)
    pool = np.arange(n_train, dtype=np.int64)
    val_pool = np.arange(n_val, dtype=np.int64)
    for step in range(1, config.steps + 1):
        batch = rng.sample(pool, config.batch_size)
        vsel = None
        if step % config.eval_interval == 0:
            vsel = rng.sample(val_pool, config.val_batch_size)
        yield step, batch, vsel


def train_head(
    train_x: np.ndarray,
    train_y,
    val_x: np.ndarray,
    val_y,
    config: TrainConfig = TrainConfig(),
    label_names=None,
) -> tuple[SoftmaxHead, MetricsSeries]:
    """Plain minibatch SGD on a zero-initialized softmax head.

    Each step draws ``batch_size`` training rows without replacement; every
    ``eval_interval`` steps the current batch accuracy and a fresh random
    validation subset are recorded. The last record covers the full sets.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if train_x.ndim != 2 or val_x.ndim != 2 or train_x.shape[1] != val_x.shape[1]:
        raise ValueError("training and validation bottlenecks must share their dimension")
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise ValueError("labels are not aligned with bottlenecks")
    if config.steps and config.batch_size > len(train_x):
        raise ValueError(f"batch_size {config.batch_size} exceeds training set of {len(train_x)}")
    if config.steps >= config.eval_interval and config.val_batch_size > len(val_x):
        raise ValueError(f"val_batch_size {config.val_batch_size} exceeds validation set of {len(val_x)}")
    if label_names is None:
        label_names = tuple(str(i) for i in range(int(max(train_y.max(initial=0), val_y.max(initial=0))) + 1))
    head = SoftmaxHead.zeros(train_x.shape[1], label_names)
    metrics = MetricsSeries()

    lr = config.learning_rate
    for step, batch, vsel in batch_schedule(len(train_x), len(val_x), config):
        bx, by = train_x[batch], train_y[batch]
        gw, gb = head_gradient(head, bx, by)
        head.weights -= lr * gw
        head.biases -= lr * gb
        if vsel is not None:
            train_acc, train_xent = _batch_stats(head, bx, by)
            val_acc, val_xent = _batch_stats(head, val_x[vsel], val_y[vsel])
            metrics.records.append(MetricsRecord(step, train_acc, val_acc, train_xent, val_xent))

    train_acc, train_xent = evaluate(head, train_x, train_y)
    val_acc, val_xent = evaluate(head, val_x, val_y) if len(val_x) else (float("nan"), float("nan"))
    metrics.records.append(MetricsRecord(config.steps, train_acc, val_acc, train_xent, val_xent, final=True))
    return head, metrics


def predict_topk(head: SoftmaxHead, bottleneck: np.ndarray, k: int = 3) -> list[tuple[str, float]]:
    if not 1 <= k <= head.n_labels:
        raise ValueError(f"k must lie in [1, {head.n_labels}], got {k}")
    probs = head.probabilities(np.asarray(bottleneck)[None])[0]
    order = np.argsort(-probs, kind="stable")[:k]
    return [(head.label_names[i], float(probs[i])) for i in order]

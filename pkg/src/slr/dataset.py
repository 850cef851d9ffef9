"""Sign Language MNIST ingestion, normalization, splitting and PNG export."""

from __future__ import annotations

import csv
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .rng import SplitMix64

IMAGE_SIDE = 28
N_PIXELS = IMAGE_SIDE * IMAGE_SIDE
HEADER = ["label"] + [f"pixel{i}" for i in range(1, N_PIXELS + 1)]

# Raw labels are alphabet positions; J (9) and Z (25) need motion and never occur.
ALPHABET = string.ascii_uppercase
MISSING_LABELS = (9, 25)
RAW_LABELS = tuple(i for i in range(26) if i not in MISSING_LABELS)
LABEL_NAMES = tuple(ALPHABET[i] for i in RAW_LABELS)
_CLASS_OF_RAW = {raw: idx for idx, raw in enumerate(RAW_LABELS)}

SCHEMES = ("unit", "signed")


class DatasetError(Exception):
    pass


class ParseError(DatasetError):
    def __init__(self, row: int, reason: str) -> None:
        super().__init__(f"row {row}: {reason}")
        self.row = row


class LabelError(DatasetError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    label: int
    pixels: np.ndarray  # (784,) uint8, row-major 28x28

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.shape != (N_PIXELS,):
            raise ValueError(f"expected {N_PIXELS} pixels, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
                raise ValueError("pixel values must lie in [0, 255]")
            pixels = pixels.astype(np.uint8)
        object.__setattr__(self, "pixels", pixels)
        label_to_letter(self.label)

    @property
    def letter(self) -> str:
        return label_to_letter(self.label)


@dataclass(frozen=True)
class Dataset:
    """Images stored column-wise: ``labels[i]`` and ``pixels[i]`` form image i."""

    labels: np.ndarray  # (n,) raw alphabet positions
    pixels: np.ndarray  # (n, 784) uint8
    label_names: tuple[str, ...] = LABEL_NAMES

    def __post_init__(self) -> None:
        if len(self.label_names) != 24 or len(set(self.label_names)) != 24:
            raise ValueError("label_names must hold 24 distinct entries")
        if self.pixels.ndim != 2 or self.pixels.shape[1] != N_PIXELS:
            raise ValueError(f"pixels must have shape (n, {N_PIXELS})")
        if len(self.labels) != len(self.pixels):
            raise ValueError("labels and pixels disagree on image count")
        for raw in np.unique(self.labels):
            label_to_letter(int(raw))

    @classmethod
    def from_images(cls, images: list[LabeledImage]) -> "Dataset":
        labels = np.array([im.label for im in images], dtype=np.int64)
        pixels = np.stack([im.pixels for im in images]) if images else np.zeros((0, N_PIXELS), np.uint8)
        return cls(labels, pixels)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(int(self.labels[i]), self.pixels[i])

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    @property
    def images(self) -> list[LabeledImage]:
        return list(self)

    @property
    def class_indices(self) -> np.ndarray:
        """Labels remapped to 0..23 in ``label_names`` order (the head's class ids)."""
        return np.array([_CLASS_OF_RAW[int(r)] for r in self.labels], dtype=np.int64)

    def histogram(self) -> dict[str, int]:
        counts = np.bincount(self.class_indices, minlength=len(self.label_names))
        return {name: int(c) for name, c in zip(self.label_names, counts)}


def label_to_letter(label: int) -> str:
    if label in MISSING_LABELS or not 0 <= label < 26:
        raise LabelError(f"invalid label {label}: expected 0-24 excluding 9 (J)")
    return ALPHABET[label]


def class_index(label: int) -> int:
    """Position of a raw label among the 24 classes."""
    label_to_letter(label)
    return _CLASS_OF_RAW[label]


def load_csv(path: str | Path) -> Dataset:
    """Read the published ``label,pixel1,...,pixel784`` CSV.

    Data rows are numbered from 1 (the header is row 0) in error messages.
    """
    path = Path(path)
    labels: list[int] = []
    rows: list[np.ndarray] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(0, "missing header")
        if [h.strip() for h in header] != HEADER:
            raise ParseError(0, "header must be label,pixel1,...,pixel784")
        for rownum, fields in enumerate(reader, start=1):
            if not fields:
                continue
            if len(fields) != N_PIXELS + 1:
                raise ParseError(rownum, f"expected {N_PIXELS + 1} fields, got {len(fields)}")
            try:
                values = np.array(fields, dtype=np.int64)
            except ValueError:
                raise ParseError(rownum, "non-integer field") from None
            px = values[1:]
            if px.min() < 0 or px.max() > 255:
                raise ParseError(rownum, "pixel value outside [0, 255]")
            label = int(values[0])
            try:
                label_to_letter(label)
            except LabelError as exc:
                raise LabelError(f"row {rownum}: {exc}") from None
            labels.append(label)
            rows.append(px.astype(np.uint8))
    pixels = np.stack(rows) if rows else np.zeros((0, N_PIXELS), np.uint8)
    return Dataset(np.array(labels, dtype=np.int64), pixels)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(HEADER) + "\n")
        table = np.column_stack([dataset.labels, dataset.pixels]).astype(np.int64)
        for row in table:
            fh.write(",".join(map(str, row.tolist())) + "\n")


@dataclass(frozen=True)
class SplitManifest:
    seed: int
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_ids), len(self.val_ids), len(self.test_ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SplitManifest):
            return NotImplemented
        return self.seed == other.seed and all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.train_ids, self.val_ids, self.test_ids),
                (other.train_ids, other.val_ids, other.test_ids),
            )
        )

    def to_text(self) -> str:
        lines = [f"seed={self.seed}"]
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            lines.append(f"{name}:")
            lines.extend(str(int(i)) for i in ids)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("seed="):
            raise ValueError("split manifest must start with seed=<u64>")
        seed = int(lines[0][5:])
        sections: dict[str, list[int]] = {}
        current = None
        for line in lines[1:]:
            line = line.strip()
            if line in ("train:", "val:", "test:"):
                current = line[:-1]
                sections[current] = []
            elif line:
                if current is None:
                    raise ValueError("index before any section header")
                sections[current].append(int(line))
        try:
            return cls(seed, *(np.array(sections[k], dtype=np.int64) for k in ("train", "val", "test")))
        except KeyError as exc:
            raise ValueError(f"missing section {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_text(Path(path).read_text())


def split_sizes(n: int) -> tuple[int, int, int]:
    test = n // 10
    val = n // 10
    return n - val - test, val, test


def split(dataset: Dataset | int, seed: int) -> SplitManifest:
    """80/10/10 partition of a seeded Fisher-Yates permutation.

    The permutation is cut in order train, val, test. ``dataset`` may also be
    a plain size.
    """
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.arange(n, dtype=np.int64)
    SplitMix64(seed).shuffle(perm)
    n_train, n_val, _ = split_sizes(n)
    return SplitManifest(
        seed=seed,
        train_ids=perm[:n_train].copy(),
        val_ids=perm[n_train : n_train + n_val].copy(),
        test_ids=perm[n_train + n_val :].copy(),
    )


def normalize(pixels: np.ndarray, scheme: str = "signed") -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    if scheme == "unit":
        out = p / 255.0
    elif scheme == "signed":
        out = p / 127.5 - 1.0
    else:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    return out.astype(np.float32)


def to_tensor(image: LabeledImage, scheme: str = "signed") -> np.ndarray:
    return normalize(image.pixels, scheme).reshape(IMAGE_SIDE, IMAGE_SIDE, 1)


def png_name(index: int, label: int) -> str:
    return f"{index}_{label_to_letter(label)}.png"


def export_png(dataset: Dataset, directory: str | Path) -> int:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {directory}: {exc}") from exc
    for i in range(len(dataset)):
        target = directory / png_name(i, int(dataset.labels[i]))
        img = Image.fromarray(dataset.pixels[i].reshape(IMAGE_SIDE, IMAGE_SIDE))
        try:
            img.save(target, format="PNG")
        except OSError as exc:
            raise DatasetError(f"cannot write {target}: {exc}") from exc
    return len(dataset)


def read_png(path: str | Path) -> np.ndarray:
    """784 uint8 pixels from a 28x28 grayscale PNG."""
    try:
        img = Image.open(path)
    except UnidentifiedImageError:
        raise DatasetError(f"{path}: not a readable image") from None
    with img:
        if img.size != (IMAGE_SIDE, IMAGE_SIDE):
            raise DatasetError(f"{path}: expected 28x28 image, got {img.size[0]}x{img.size[1]}")
        if img.mode != "L":
            raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8).reshape(N_PIXELS).copy()

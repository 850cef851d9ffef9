"""Single-file model container designed for copy-free memory-mapped loading.

Layout (little-endian)::

    magic "SLRMODL1" | u32 version | u64 manifest length | manifest text
    | zero padding to 64 | blobs, each at a 64-byte boundary and zero padded
    | u32 CRC32 of the payload region (first blob offset up to the CRC)

The manifest is UTF-8 text whose last line carries a CRC32 of the lines
before it, so a damaged manifest is caught before any blob is touched.
Each blob starts with a dtype tag byte: 0 = real32 (followed by float32
data), 1 = quant8 (followed by float32 scale, u8 zero point, uint8 codes).
"""

from __future__ import annotations

import math
import mmap
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import IMAGE_SIDE, normalize
from .head import SoftmaxHead, predict_topk, softmax
from .nn import BackboneSpec, WeightSet, forward_batch, validate_weights
from .quant import QuantizedHead, QuantizedTensor, dequantize_codes

MAGIC = b"SLRMODL1"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<8sIQ")
_QUANT_HEADER = struct.Struct("<BfB")
DTYPE_REAL32 = 0
DTYPE_QUANT8 = 1
DTYPE_NAMES = {DTYPE_REAL32: "real32", DTYPE_QUANT8: "quant8"}
DTYPE_TAGS = {v: k for k, v in DTYPE_NAMES.items()}


class ContainerError(Exception):
    pass


class FormatError(ContainerError):
    pass


class CorruptionError(ContainerError):
    pass


class BoundsError(ContainerError):
    pass


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class BlobEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    length: int
    scale: float | None = None
    zero_point: int | None = None

    @property
    def count(self) -> int:
        return math.prod(self.shape)

    @property
    def data_offset(self) -> int:
        return self.offset + (1 if self.dtype == "real32" else _QUANT_HEADER.size)

    def to_text(self) -> str:
        parts = [
            f"blob name={self.name}",
            f"dtype={self.dtype}",
            "shape=" + "x".join(str(s) for s in self.shape),
            f"offset={self.offset}",
            f"length={self.length}",
        ]
        if self.dtype == "quant8":
            parts += [f"scale={self.scale!r}", f"zero_point={self.zero_point}"]
        return " ".join(parts)

    @classmethod
    def from_text(cls, line: str) -> "BlobEntry":
        attrs = dict(tok.split("=", 1) for tok in line.split()[1:])
        dtype = attrs["dtype"]
        if dtype not in DTYPE_TAGS:
            raise ValueError(f"unknown dtype {dtype!r}")
        return cls(
            attrs["name"],
            dtype,
            tuple(int(s) for s in attrs["shape"].split("x")),
            int(attrs["offset"]),
            int(attrs["length"]),
            float(attrs["scale"]) if "scale" in attrs else None,
            int(attrs["zero_point"]) if "zero_point" in attrs else None,
        )


@dataclass(frozen=True)
class ContainerManifest:
    version: int
    backbone_text: str
    label_names: tuple[str, ...]
    normalization: str
    blobs: tuple[BlobEntry, ...]

    def blob(self, name: str) -> BlobEntry:
        for b in self.blobs:
            if b.name == name:
                return b
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [
            f"format={self.version}",
            "labels=" + ",".join(self.label_names),
            f"normalization={self.normalization}",
            f"blobs={len(self.blobs)}",
            *(b.to_text() for b in self.blobs),
            "backbone:",
            *self.backbone_text.strip("\n").splitlines(),
            "end",
        ]
        return seal_manifest("\n".join(lines) + "\n")

    @classmethod
    def from_text(cls, text: str) -> "ContainerManifest":
        body = unseal_manifest(text)
        lines = body.splitlines()
        try:
            version = int(_expect(lines[0], "format="))
            labels = tuple(_expect(lines[1], "labels=").split(","))
            normalization = _expect(lines[2], "normalization=")
            count = int(_expect(lines[3], "blobs="))
            blobs = tuple(BlobEntry.from_text(ln) for ln in lines[4 : 4 + count])
            if lines[4 + count] != "backbone:" or lines[-1] != "end":
                raise ValueError("backbone section missing")
            backbone = "\n".join(lines[5 + count : -1]) + "\n"
        except (IndexError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None
        return cls(version, backbone, labels, normalization, blobs)


def _expect(line: str, prefix: str) -> str:
    if not line.startswith(prefix):
        raise ValueError(f"expected {prefix!r} line, got {line[:40]!r}")
    return line[len(prefix) :]


def seal_manifest(body: str) -> str:
    """Append the ``manifest_crc32=`` line covering ``body``."""
    return body + f"manifest_crc32={zlib.crc32(body.encode()):08x}\n"


def unseal_manifest(text: str) -> str:
    body, sep, last = text.rstrip("\n").rpartition("\n")
    if not sep or not last.startswith("manifest_crc32="):
        raise FormatError("manifest checksum line missing")
    body += "\n"
    try:
        stored = int(last[len("manifest_crc32=") :], 16)
    except ValueError:
        raise FormatError("manifest checksum unreadable") from None
    if stored != zlib.crc32(body.encode()) or text != seal_manifest(body):
        raise FormatError("manifest checksum mismatch")
    return body


# --------------------------------------------------------------------------
# writing


def _blob_bytes(item) -> tuple[str, tuple[int, ...], bytes, float | None, int | None]:
    if isinstance(item, QuantizedTensor):
        head = _QUANT_HEADER.pack(DTYPE_QUANT8, item.scale, item.zero_point)
        return "quant8", item.shape, head + item.codes.tobytes(), item.scale, item.zero_point
    arr = np.ascontiguousarray(item, dtype="<f4")
    return "real32", tuple(arr.shape), bytes([DTYPE_REAL32]) + arr.tobytes(), None, None


def model_blobs(spec: BackboneSpec, weights: WeightSet, head) -> list[tuple[str, object]]:
    """(name, tensor) pairs in file order: backbone layers, then the head."""
    items: list[tuple[str, object]] = []
    for idx in sorted(weights.kernels):
        items.append((f"layer{idx}.kernel", weights.kernels[idx]))
        if idx in weights.biases:
            items.append((f"layer{idx}.bias", weights.biases[idx]))
    items.append(("head.weights", head.weights))
    items.append(("head.biases", head.biases))
    return items


def build_container(
    spec: BackboneSpec,
    weights: WeightSet,
    head: SoftmaxHead | QuantizedHead,
    label_names=None,
    normalization: str = "signed",
) -> bytes:
    validate_weights(spec, weights)
    label_names = tuple(label_names if label_names is not None else head.label_names)
    head_shape = tuple(head.weights.shape)
    if head_shape != (spec.bottleneck_dim, len(label_names)):
        raise ValueError(
            f"head shape {head_shape} does not fit bottleneck dim {spec.bottleneck_dim}"
            f" and {len(label_names)} labels"
        )
    if any("," in name or not name or name != name.strip() for name in label_names):
        raise ValueError("label names must be non-empty and contain no commas or edge whitespace")
    encoded = [(name, *_blob_bytes(t)) for name, t in model_blobs(spec, weights, head)]

    payload_start = _align(_HEADER.size)
    while True:
        offset = payload_start
        entries = []
        for name, dtype, shape, raw, scale, zp in encoded:
            entries.append(BlobEntry(name, dtype, shape, offset, len(raw), scale, zp))
            offset = _align(offset + len(raw))
        manifest = ContainerManifest(VERSION, spec.to_text(), label_names, normalization, tuple(entries))
        text = manifest.to_text().encode()
        needed = _align(_HEADER.size + len(text))
        if needed == payload_start:
            break
        payload_start = needed

    out = bytearray(_HEADER.pack(MAGIC, VERSION, len(text)))
    out += text
    out += bytes(payload_start - len(out))
    for entry, (_, _, _, raw, _, _) in zip(entries, encoded):
        out += raw
        out += bytes(_align(len(out)) - len(out))
    out += struct.pack("<I", zlib.crc32(memoryview(out)[payload_start:]))
    return bytes(out)


def write_container(
    spec: BackboneSpec,
    weights: WeightSet,
    head: SoftmaxHead | QuantizedHead,
    label_names=None,
    path: str | Path = "model.slr",
    normalization: str = "signed",
) -> int:
    """Write a container; the bytes are fully determined by the inputs."""
    data = build_container(spec, weights, head, label_names, normalization)
    Path(path).write_bytes(data)
    return len(data)


# --------------------------------------------------------------------------
# reading


@dataclass
class ContainerReport:
    path: str
    file_size: int
    version: int | None = None
    manifest: ContainerManifest | None = None
    checks: dict[str, str] = field(default_factory=dict)
    errors: list[ContainerError] = field(default_factory=list)
    byte_totals: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "file_size": self.file_size,
            "version": self.version,
            "ok": self.ok,
            "checks": dict(self.checks),
            "byte_totals": dict(self.byte_totals),
            "blobs": [
                {
                    "name": b.name,
                    "dtype": b.dtype,
                    "shape": list(b.shape),
                    "offset": b.offset,
                    "length": b.length,
                    **({"scale": b.scale, "zero_point": b.zero_point} if b.dtype == "quant8" else {}),
                }
                for b in (self.manifest.blobs if self.manifest else ())
            ],
        }

    def to_text(self) -> str:
        lines = [f"container {self.path} ({self.file_size} bytes, version {self.version})"]
        for b in self.manifest.blobs if self.manifest else ():
            shape = "x".join(map(str, b.shape))
            lines.append(f"  {b.name:<16} {b.dtype:<7} {shape:<14} offset={b.offset} length={b.length}")
        for name, status in self.checks.items():
            lines.append(f"{name}: {status}")
        return "\n".join(lines)


def _inspect(buf, path: str = "<buffer>", stop_early: bool = False) -> ContainerReport:
    """Run every structural check on a container buffer.

    Checks run roughly in file order (the payload CRC before per-blob tags); later checks that depend on a failed one are
    skipped. With ``stop_early`` the first failure ends the scan.
    """
    size = len(buf)
    report = ContainerReport(path, size)

    def fail(check: str, exc: ContainerError) -> bool:
        report.checks[check] = f"FAIL: {exc}"
        report.errors.append(exc)
        return stop_early

    if size < _HEADER.size:
        fail("magic", BoundsError(f"{path}: file truncated ({size} bytes)"))
        return report
    magic, version, manifest_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        fail("magic", FormatError(f"{path}: bad magic {bytes(magic)!r}"))
        return report
    report.checks["magic"] = "ok"
    report.version = version
    if version != VERSION:
        fail("version", FormatError(f"{path}: unsupported version {version}"))
        return report
    report.checks["version"] = "ok"

    manifest_end = _HEADER.size + manifest_len
    if manifest_end > size:
        fail("manifest", BoundsError(f"{path}: manifest length {manifest_len} runs past end of file"))
        return report
    try:
        # the only copy made at load time: the manifest text itself
        text = bytes(buf[_HEADER.size : manifest_end]).decode("utf-8")
        manifest = ContainerManifest.from_text(text)
    except UnicodeDecodeError:
        fail("manifest", FormatError(f"{path}: manifest is not UTF-8"))
        return report
    except FormatError as exc:
        fail("manifest", FormatError(f"{path}: {exc}"))
        return report
    if manifest.version != version:
        fail("manifest", FormatError(f"{path}: manifest format {manifest.version} != header version {version}"))
        return report
    try:
        BackboneSpec.from_text(manifest.backbone_text)
    except (ValueError, KeyError) as exc:
        if fail("manifest", FormatError(f"{path}: bad backbone spec: {exc}")):
            return report
    else:
        report.checks["manifest"] = "ok"
    report.manifest = manifest

    payload_start = _align(manifest_end)
    if payload_start > size:
        fail("padding", BoundsError(f"{path}: file truncated inside header padding"))
        return report
    if any(buf[manifest_end:payload_start]):
        if fail("padding", FormatError(f"{path}: non-zero header padding")):
            return report
    else:
        report.checks["padding"] = "ok"

    blobs = sorted(manifest.blobs, key=lambda b: b.offset)
    payload_end = _align(blobs[-1].offset + blobs[-1].length) if blobs else payload_start

    bounds_ok = True
    for b in blobs:
        if b.offset < payload_start or b.offset + b.length > size - 4:
            bounds_ok = False
            if fail("bounds", BoundsError(f"{path}: blob {b.name} [{b.offset}, {b.offset + b.length}) outside payload")):
                return report
    if size < payload_end + 4:
        bounds_ok = False
        if fail("bounds", BoundsError(f"{path}: file truncated: {size} bytes, expected {payload_end + 4}")):
            return report
    if bounds_ok:
        report.checks["bounds"] = "ok"

    misaligned = [b.name for b in blobs if b.offset % ALIGN]
    if misaligned:
        if fail("alignment", FormatError(f"{path}: blobs not {ALIGN}-byte aligned: {', '.join(misaligned)}")):
            return report
    else:
        report.checks["alignment"] = "ok"

    overlaps = [f"{a.name}/{b.name}" for a, b in zip(blobs, blobs[1:]) if a.offset + a.length > b.offset]
    if overlaps:
        if fail("overlap", FormatError(f"{path}: overlapping blobs: {', '.join(overlaps)}")):
            return report
    else:
        report.checks["overlap"] = "ok"

    if not bounds_ok:
        return report

    stored = struct.unpack_from("<I", buf, payload_end)[0]
    actual = zlib.crc32(memoryview(buf)[payload_start:payload_end])
    if stored != actual:
        if fail("checksum", CorruptionError(f"{path}: payload checksum mismatch (stored {stored:08x}, computed {actual:08x})")):
            return report
    else:
        report.checks["checksum"] = "ok"

    blob_errors = []
    for b in blobs:
        expected = b.count * 4 + 1 if b.dtype == "real32" else b.count + _QUANT_HEADER.size
        if b.length != expected:
            blob_errors.append(f"{b.name}: length {b.length} != {expected}")
            continue
        tag = buf[b.offset]
        if tag != DTYPE_TAGS[b.dtype]:
            blob_errors.append(f"{b.name}: dtype tag {tag} does not match {b.dtype}")
        elif b.dtype == "quant8":
            _, scale, zp = _QUANT_HEADER.unpack_from(buf, b.offset)
            if scale != b.scale or zp != b.zero_point:
                blob_errors.append(f"{b.name}: quantization header disagrees with manifest")
    if blob_errors:
        if fail("blobs", FormatError(f"{path}: " + "; ".join(blob_errors))):
            return report
    else:
        report.checks["blobs"] = "ok"

    if size != payload_end + 4:
        fail("length", FormatError(f"{path}: {size - payload_end - 4} trailing bytes after checksum"))
    else:
        report.checks["length"] = "ok"

    blob_bytes = sum(b.length for b in blobs)
    report.byte_totals = {
        "header": _HEADER.size,
        "manifest": manifest_len,
        "header_padding": payload_start - manifest_end,
        "blobs": blob_bytes,
        "blob_padding": payload_end - payload_start - blob_bytes,
        "checksum": 4,
    }
    report.byte_totals["total"] = sum(report.byte_totals.values())
    return report


def validate_container(path: str | Path) -> ContainerReport:
    """Check a container without building a model; problems are collected."""
    path = Path(path)
    with open(path, "rb") as fh:
        size = path.stat().st_size
        if size == 0:
            return _inspect(b"", str(path))
        with mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) as mm:
            report = _inspect(mm, str(path))
    return report


# --------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class HeadParams:
    """Head tensors as stored: float32 arrays or quantized codes."""

    weights: np.ndarray
    biases: np.ndarray
    label_names: tuple[str, ...]
    weight_quant: tuple[float, int] | None = None
    bias_quant: tuple[float, int] | None = None

    def materialize(self) -> SoftmaxHead:
        """Dequantize on read; real32 heads pass through unchanged."""
        w, b = self.weights, self.biases
        if self.weight_quant is not None:
            w = dequantize_codes(w, *self.weight_quant).reshape(w.shape)
        if self.bias_quant is not None:
            b = dequantize_codes(b, *self.bias_quant).reshape(b.shape)
        return SoftmaxHead(w, b, self.label_names)


class InferenceModel:
    """Backbone + head ready for prediction, backed by arrays or by a file mapping."""

    def __init__(self, spec: BackboneSpec, weights: WeightSet, head: HeadParams, normalization: str = "signed"):
        self.spec = spec
        self.weights = weights
        self.head_params = head
        self.normalization = normalization

    @classmethod
    def from_parts(cls, spec, weights, head, normalization: str = "signed") -> "InferenceModel":
        """In-memory model holding exactly what a container would store."""
        kernels = {i: np.asarray(k, dtype=np.float32) for i, k in weights.kernels.items()}
        biases = {i: np.asarray(b, dtype=np.float32) for i, b in weights.biases.items()}
        if isinstance(head, QuantizedHead):
            params = HeadParams(
                head.weights.codes.reshape(head.weights.shape),
                head.biases.codes.reshape(head.biases.shape),
                head.label_names,
                (head.weights.scale, head.weights.zero_point),
                (head.biases.scale, head.biases.zero_point),
            )
        else:
            params = HeadParams(
                np.asarray(head.weights, dtype=np.float32),
                np.asarray(head.biases, dtype=np.float32),
                head.label_names,
            )
        return cls(spec, WeightSet(kernels, biases), params, normalization)

    @property
    def label_names(self) -> tuple[str, ...]:
        return self.head_params.label_names

    def bottlenecks(self, pixels: np.ndarray) -> np.ndarray:
        """Bottlenecks for raw uint8 pixels of shape (784,) or (n, 784)."""
        pixels = np.atleast_2d(np.asarray(pixels))
        images = normalize(pixels, self.normalization).reshape(-1, IMAGE_SIDE, IMAGE_SIDE, 1)
        return forward_batch(self.spec, self.weights, images)

    def probabilities(self, pixels: np.ndarray) -> np.ndarray:
        return softmax(self.head_params.materialize().logits(self.bottlenecks(pixels)))

    def predict_topk(self, pixels: np.ndarray, k: int = 3) -> list[tuple[str, float]]:
        head = self.head_params.materialize()
        return predict_topk(head, self.bottlenecks(pixels)[0], k)


class MappedModel(InferenceModel):
    """Model whose tensors are read-only views into a memory-mapped file.

    ``copied_bytes`` counts blob payload bytes copied while loading; the
    mapped path never copies, so it stays 0.
    """

    def __init__(self, manifest: ContainerManifest, views: dict[str, np.ndarray], head: HeadParams, source):
        spec = BackboneSpec.from_text(manifest.backbone_text)
        weights = WeightSet()
        for name, view in views.items():
            if name.startswith("layer"):
                idx, kind = name[5:].split(".")
                (weights.kernels if kind == "kernel" else weights.biases)[int(idx)] = view
        super().__init__(spec, weights, head, manifest.normalization)
        self.manifest = manifest
        self.views = views
        self.copied_bytes = 0
        self._source = source

    def close(self) -> None:
        self.views = {}
        self.weights = WeightSet()
        self._source = None


def _blob_view(buf, entry: BlobEntry) -> np.ndarray:
    if entry.dtype == "real32":
        arr = np.frombuffer(buf, dtype="<f4", count=entry.count, offset=entry.data_offset)
    else:
        arr = np.frombuffer(buf, dtype=np.uint8, count=entry.count, offset=entry.data_offset)
    return arr.reshape(entry.shape)


def _model_from_views(views: dict[str, np.ndarray], manifest: ContainerManifest, source) -> MappedModel:
    views = dict(views)
    w_entry, b_entry = manifest.blob("head.weights"), manifest.blob("head.biases")
    head = HeadParams(
        views.pop("head.weights"),
        views.pop("head.biases"),
        manifest.label_names,
        (w_entry.scale, w_entry.zero_point) if w_entry.dtype == "quant8" else None,
        (b_entry.scale, b_entry.zero_point) if b_entry.dtype == "quant8" else None,
    )
    model = MappedModel(manifest, views, head, source)
    validate_weights(model.spec, model.weights)
    return model


def map_container(path: str | Path) -> MappedModel:
    """Memory-map a container and return a model viewing the mapped blobs.

    Validation (magic, manifest checksum, bounds, alignment, payload CRC)
    runs first; any failure raises and no model is returned.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        if path.stat().st_size == 0:
            raise BoundsError(f"{path}: empty file")
        mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
    report = _inspect(mm, str(path), stop_early=True)
    if report.errors:
        mm.close()
        raise report.errors[0]
    views = {b.name: _blob_view(mm, b) for b in report.manifest.blobs}
    return _model_from_views(views, report.manifest, mm)


def load_container_copy(path: str | Path) -> MappedModel:
    """Conventional read-into-heap loader, the baseline for load timing."""
    data = Path(path).read_bytes()
    report = _inspect(data, str(path), stop_early=True)
    if report.errors:
        raise report.errors[0]
    copies = {b.name: _blob_view(data, b).copy() for b in report.manifest.blobs}
    model = _model_from_views(copies, report.manifest, None)
    model.copied_bytes = sum(a.nbytes for a in copies.values())
    return model

import struct
import zlib

import numpy as np
import pytest

from checks import desk_model, undetected_corruptions
from slr.container import (
    ALIGN,
    MAGIC,
    BoundsError,
    ContainerManifest,
    CorruptionError,
    FormatError,
    InferenceModel,
    build_container,
    load_container_copy,
    map_container,
    model_blobs,
    seal_manifest,
    validate_container,
    write_container,
)
from slr.quant import quantize_head


@pytest.fixture(scope="module")
def model():
    return desk_model(3)


@pytest.fixture
def packed(tmp_path, model):
    spec, weights, head = model
    path = tmp_path / "m.slr"
    write_container(spec, weights, head, None, path)
    return path


def serialized(tensor):
    return np.ascontiguousarray(tensor, dtype="<f4").tobytes()


def test_round_trip_blob_bytes(packed, model):
    spec, weights, head = model
    mm = map_container(packed)
    assert mm.manifest.backbone_text == spec.to_text()
    assert mm.label_names == head.label_names
    for name, tensor in model_blobs(spec, weights, head):
        if name.startswith("head."):
            view = getattr(mm.head_params, name[5:])
        else:
            view = mm.views[name]
        assert view.tobytes() == serialized(tensor), name
    raw = packed.read_bytes()
    sources = dict(model_blobs(spec, weights, head))
    for entry in mm.manifest.blobs:
        assert entry.offset % ALIGN == 0
        assert raw[entry.offset] == 0  # real32 tag
        assert raw[entry.data_offset : entry.offset + entry.length] == serialized(sources[entry.name])


def test_header_layout(packed):
    raw = packed.read_bytes()
    magic, version, mlen = struct.unpack_from("<8sIQ", raw)
    assert magic == MAGIC == b"SLRMODL1" and version == 1
    text = raw[20 : 20 + mlen].decode()
    manifest = ContainerManifest.from_text(text)
    first = min(b.offset for b in manifest.blobs)
    assert first == -(-(20 + mlen) // 64) * 64
    end = max(b.offset + b.length for b in manifest.blobs)
    end = -(-end // 64) * 64
    assert len(raw) == end + 4
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[first:end])


def test_writing_is_deterministic(tmp_path, model):
    spec, weights, head = model
    write_container(spec, weights, head, None, tmp_path / "a.slr")
    write_container(spec, weights, head, None, tmp_path / "b.slr")
    assert (tmp_path / "a.slr").read_bytes() == (tmp_path / "b.slr").read_bytes()


def test_quantized_head_is_smaller(model):
    spec, weights, head = model
    real = build_container(spec, weights, head)
    quant = build_container(spec, weights, quantize_head(head))
    saved = 3 * head.param_count()
    # each of the two head blobs and the manifest can shift by up to one alignment unit
    assert abs((len(real) - len(quant)) - saved) < 3 * ALIGN


def test_inconsistent_head_rejected(tmp_path, model):
    spec, weights, head = model
    from slr.head import SoftmaxHead

    bad = SoftmaxHead(np.zeros((10, 24)), np.zeros(24), head.label_names)
    with pytest.raises(ValueError):
        write_container(spec, weights, bad, None, tmp_path / "x.slr")
    assert not (tmp_path / "x.slr").exists()


def test_healthy_report(packed):
    report = validate_container(packed)
    assert report.ok
    assert set(report.checks.values()) == {"ok"}
    assert report.byte_totals["total"] == packed.stat().st_size
    assert report.to_dict()["ok"] is True


def test_corrupt_first_byte(packed):
    raw = bytearray(packed.read_bytes())
    raw[0] ^= 0xFF
    packed.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        map_container(packed)
    assert not validate_container(packed).ok


def test_payload_flip_names_checksum(packed):
    mm = map_container(packed)
    offset = mm.manifest.blob("head.weights").offset + 10
    del mm
    raw = bytearray(packed.read_bytes())
    raw[offset] ^= 0x01
    packed.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError, match="checksum"):
        map_container(packed)


def test_manifest_flip_detected(packed):
    raw = bytearray(packed.read_bytes())
    raw[40] ^= 0x01
    packed.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        map_container(packed)


def test_every_single_byte_corruption_detected(model):
    spec, weights, head = model
    assert undetected_corruptions(build_container(spec, weights, quantize_head(head))) == []


def test_truncated_file(packed):
    raw = packed.read_bytes()
    for cut in (10, 200, len(raw) - 100, len(raw) - 1):
        packed.write_bytes(raw[:cut])
        with pytest.raises((BoundsError, FormatError)):
            map_container(packed)
    packed.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(BoundsError):
        map_container(packed)
    packed.write_bytes(b"")
    with pytest.raises(BoundsError):
        map_container(packed)


def test_misaligned_blob_reported(tmp_path, model):
    spec, weights, head = model
    raw = build_container(spec, weights, head)
    mlen = struct.unpack_from("<Q", raw, 12)[0]
    text = raw[20 : 20 + mlen].decode()
    body = text[: text.rindex("manifest_crc32=")]
    lines = body.splitlines()
    for i, line in enumerate(lines):
        if line.startswith("blob name=head.biases"):
            tokens = dict(t.split("=", 1) for t in line.split()[1:])
            lines[i] = line.replace(f"offset={tokens['offset']}", f"offset={int(tokens['offset']) + 8}")
    forged = seal_manifest("\n".join(lines) + "\n").encode()
    assert len(forged) == mlen
    path = tmp_path / "bad.slr"
    path.write_bytes(raw[:20] + forged + raw[20 + mlen :])
    report = validate_container(path)
    assert report.checks["alignment"].startswith("FAIL")
    assert "head.biases" in report.checks["alignment"]


def test_mapped_load_copies_nothing(packed):
    mm = map_container(packed)
    assert mm.copied_bytes == 0
    for view in list(mm.views.values()) + [mm.head_params.weights, mm.head_params.biases]:
        assert not view.flags.owndata
        assert not view.flags.writeable
    copy = load_container_copy(packed)
    assert copy.copied_bytes == sum(v.nbytes for v in copy.views.values()) + copy.head_params.weights.nbytes + copy.head_params.biases.nbytes


@pytest.mark.parametrize("quantized", [False, True])
def test_mapped_predictions_match_in_memory(tmp_path, model, small_data, quantized):
    spec, weights, head = model
    head = quantize_head(head) if quantized else head
    path = tmp_path / "p.slr"
    write_container(spec, weights, head, None, path)
    memory = InferenceModel.from_parts(spec, weights, head)
    first, second = map_container(path), map_container(path)
    pixels = small_data.pixels[:100]
    assert first.probabilities(pixels).tobytes() == memory.probabilities(pixels).tobytes()
    for row in pixels:
        assert first.predict_topk(row, 3) == second.predict_topk(row, 3) == memory.predict_topk(row, 3)


def test_map_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        map_container(tmp_path / "absent.slr")

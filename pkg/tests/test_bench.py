import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from checks import desk_model, flops_oracle_mismatches
from oracles import Counter, naive_forward
from slr.bench import (
    LatencyStats,
    emit_report,
    flops,
    fps_estimate,
    measure_latency,
    measure_load_time,
    report_text,
    summary_row,
    write_report,
)
from slr.container import InferenceModel, load_container_copy, map_container, write_container
from slr.head import MetricsRecord, MetricsSeries, SoftmaxHead
from slr.nn import BackboneSpec, LayerSpec, desk_spec, flatten_spec, init_weights, mobilenet_v1_spec, param_count


def test_single_conv_example():
    spec = BackboneSpec(28, 28, 1, (LayerSpec("conv2d", 3, 3, 1, "valid", 8), LayerSpec("flatten")))
    assert flops(spec).total_flops == 2 * 3 * 3 * 1 * 8 * 26 * 26 == 97_344
    assert flops(spec).total_macs == 97_344 // 2


def test_head_flops():
    spec = mobilenet_v1_spec()
    head = flops(spec, 24).layers[-1]
    assert head.flops == 2 * 1001 * 24 + 24 == 48_072


def test_breakdown_totals():
    fb = flops(desk_spec(), 24)
    assert fb.total_flops == sum(layer.flops for layer in fb.layers)
    assert all(layer.flops >= 0 and layer.macs >= 0 for layer in fb.layers)
    assert flops(flatten_spec()).total_flops == 0


def test_desk_flops_match_instrumented_pass():
    spec = desk_spec()
    counter = Counter()
    naive_forward(spec, init_weights(spec, 0), np.zeros((28, 28, 1)), counter)
    assert flops(spec).total_flops == counter.total


def test_random_specs_match_instrumented_pass():
    assert flops_oracle_mismatches(n_specs=12, seed=1) == []


def test_fps_examples():
    assert fps_estimate(5e9, 1e10) == 2.0
    assert fps_estimate(7e9, 7e9) == 1.0
    total = flops(desk_spec(), 24).total_flops
    assert fps_estimate(total) == 1e10 / total
    for bad in ((0, 1e10), (5e9, 0), (-1, 1e10)):
        with pytest.raises(ValueError):
            fps_estimate(*bad)


def test_latency_stats_single():
    s = LatencyStats.from_samples([3.5])
    assert s.mean_ms == s.median_ms == s.p95_ms == 3.5
    with pytest.raises(ValueError):
        LatencyStats.from_samples([])


@given(st.lists(st.floats(0.001, 1e4), min_size=1, max_size=200))
def test_median_below_p95(samples):
    s = LatencyStats.from_samples(samples)
    assert s.median_ms <= s.p95_ms
    assert min(samples) <= s.mean_ms * (1 + 1e-12) and s.mean_ms <= max(samples) * (1 + 1e-12)


def test_nearest_rank_p95():
    assert LatencyStats.from_samples(list(range(1, 101))).p95_ms == 95
    assert LatencyStats.from_samples(list(range(1, 21))).p95_ms == 19


def test_measure_latency_predictions_repeat(small_data):
    spec, weights, head = desk_model(1)
    model = InferenceModel.from_parts(spec, weights, head)
    s1, p1 = measure_latency(model, small_data.pixels[:5], warmup=2, samples=10)
    s2, p2 = measure_latency(model, small_data.pixels[:5], warmup=2, samples=10)
    assert p1 == p2
    assert s1.samples == 10 and s1.mean_ms > 0 and s1.median_ms <= s1.p95_ms
    with pytest.raises(ValueError):
        measure_latency(model, small_data.pixels[:1], samples=0)


def test_mapped_load_not_slower(tmp_path):
    spec = mobilenet_v1_spec(0.5, 224)
    head = SoftmaxHead.zeros(spec.bottleneck_dim, [str(i) for i in range(24)])
    path = tmp_path / "big.slr"
    write_container(spec, init_weights(spec, 0), head, None, path)
    assert path.stat().st_size > 4 * param_count(spec)
    mapped = measure_load_time(map_container, path, repeats=7)
    copied = measure_load_time(load_container_copy, path, repeats=7)
    assert mapped <= copied


def series(n=3):
    recs = [MetricsRecord(10 * (i + 1), 0.5 + i / 10, 0.4 + i / 10, 1.0 / (i + 1), 1.5 / (i + 1)) for i in range(n)]
    recs.append(MetricsRecord(10 * n, 0.9, 0.8, 0.3, 0.4, final=True))
    return MetricsSeries(recs)


def test_report_round_trip(tmp_path):
    report = emit_report(
        series(),
        flops(desk_spec(), 24),
        LatencyStats.from_samples([1.0, 2.0, 3.0]),
        {"real32_bytes": 100, "quant8_bytes": 25},
        model_name="desk",
        params=3248 + 64 * 24 + 24,
        retrain_seconds=90.0,
    )
    write_report(report, tmp_path / "r.json", tmp_path / "r.txt")
    assert json.loads((tmp_path / "r.json").read_text()) == report
    assert "final val accuracy: 0.8000" in (tmp_path / "r.txt").read_text()
    assert report_text(report).endswith("\n")


def test_summary_row_schema():
    row = summary_row("desk", 1_240_000, 510.6, 0.9506)
    assert row == {"model": "desk", "parameters_millions": 1.24, "time_to_retrain_min": pytest.approx(8.51), "accuracy": 0.9506}


def test_steps_zero_report():
    only_final = MetricsSeries([MetricsRecord(0, 0.05, 0.04, math.log(24), math.log(24), final=True)])
    report = emit_report(only_final)
    assert len(report["metrics"]) == 1 and report["metrics"][0]["final"] is True
    assert report["flops"] is None and report["latency"] is None

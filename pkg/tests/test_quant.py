import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from slr.head import SoftmaxHead, predict_topk
from slr.quant import (
    QuantizedHead,
    QuantizedTensor,
    dequantize_tensor,
    load_head,
    model_size_estimate,
    quantize_head,
    quantize_tensor,
    real32_payload_bytes,
    round_half_away,
    save_head,
    size_reduction,
)

finite32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)


def reconstruction_error(x, q):
    exact = q.scale * (q.codes.astype(np.float64) - q.zero_point)
    return np.max(np.abs(exact - np.asarray(x, np.float64).reshape(-1)))


def test_round_half_away():
    assert round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -2.5, 0.49])).tolist() == [1, 2, 3, -1, -3, 0]


def test_zero_tensor():
    q = quantize_tensor(np.zeros((3, 4)))
    assert q.scale == 1.0
    assert np.all(q.codes == q.zero_point)
    assert not dequantize_tensor(q).any()


def test_symmetric_unit_range():
    q = quantize_tensor(np.array([-1.0, 0.25, 1.0], np.float32))
    assert q.scale == pytest.approx(2 / 255, rel=1e-7)
    assert q.zero_point == 128
    assert dequantize_tensor(q)[1] == pytest.approx(0.25, abs=q.scale / 2)


def test_random_normal_bound(rng):
    x = rng.standard_normal(10_000).astype(np.float32)
    q = quantize_tensor(x)
    assert q.codes.size == 10_000
    assert reconstruction_error(x, q) <= q.scale / 2
    deq = dequantize_tensor(q)
    assert deq.dtype == np.float32
    assert np.array_equal(deq.reshape(-1), (q.scale * (q.codes.astype(np.float64) - q.zero_point)).astype(np.float32))


def test_code_at_zero_point_is_exact_zero():
    q = QuantizedTensor((2,), np.array([7, 9], np.uint8), 0.3, 7)
    assert dequantize_tensor(q)[0] == 0.0


def test_grid_values_recovered_exactly():
    scale = 0.0625  # power of two keeps every grid point exact
    x = np.arange(-40, 216) * scale  # 256 points span exactly 255 steps
    q = quantize_tensor(x)
    np.testing.assert_array_equal(dequantize_tensor(q), x.astype(np.float32))


@settings(max_examples=200)
@given(arrays(np.float32, array_shapes(max_dims=3, max_side=12), elements=finite32))
def test_round_trip_bound_and_zero(x):
    q = quantize_tensor(x)
    assert q.codes.size == x.size and q.shape == x.shape
    assert reconstruction_error(x, q) <= q.scale / 2
    zero_code = quantize_tensor(np.append(x.reshape(-1), 0.0)).codes[-1]
    q0 = quantize_tensor(np.append(x.reshape(-1), 0.0))
    assert q0.scale * (int(zero_code) - q0.zero_point) == 0.0


@settings(max_examples=200)
@given(arrays(np.float32, st.integers(2, 60), elements=finite32))
def test_codes_monotone(x):
    q = quantize_tensor(x)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(q.codes[order].astype(int)) >= 0)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize_tensor(np.array([]))
    with pytest.raises(ValueError):
        quantize_tensor(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        quantize_tensor(np.array([np.inf]))


def test_zero_and_constant_heads_keep_rankings(rng):
    zero = SoftmaxHead.zeros(5, "abcd")
    qz = quantize_head(zero).dequantize()
    assert not qz.weights.any() and not qz.biases.any()
    const = SoftmaxHead(np.zeros((5, 4)), np.array([0.0, 2.0, 2.0, -1.0]), "abcd")
    qc = quantize_head(const).dequantize()
    for _ in range(10):
        b = rng.standard_normal(5)
        assert [n for n, _ in predict_topk(qc, b, 4)] == [n for n, _ in predict_topk(const, b, 4)]


def test_payload_is_a_quarter(rng):
    head = SoftmaxHead(rng.standard_normal((64, 24)), rng.standard_normal(24), [str(i) for i in range(24)])
    qh = quantize_head(head)
    assert qh.param_count() == head.param_count() == 64 * 24 + 24
    assert 4 * qh.payload_bytes() == real32_payload_bytes(head)
    assert 1 - qh.payload_bytes() / real32_payload_bytes(head) == 0.75


def test_model_size_estimate():
    full = model_size_estimate(1_240_000, 32)
    small = model_size_estimate(1_240_000, 8)
    assert full.total_bytes == 4_960_000
    assert small.total_bytes == 1_240_000
    assert size_reduction(full, small) == 0.75
    assert model_size_estimate(0).total_bytes == 0
    with pytest.raises(ValueError):
        model_size_estimate(10, 16)
    with pytest.raises(ValueError):
        model_size_estimate(-1)


@given(st.integers(0, 10**9))
def test_size_identity(m):
    assert model_size_estimate(m, 8).total_bytes * 4 == model_size_estimate(m, 32).total_bytes


def test_head_file_round_trip(tmp_path, rng):
    head = SoftmaxHead(rng.standard_normal((6, 3)), rng.standard_normal(3), "xyz")
    qh = quantize_head(head)
    save_head(tmp_path / "q.npz", qh, seed=1)
    back, meta = load_head(tmp_path / "q.npz")
    assert isinstance(back, QuantizedHead) and meta == {"seed": 1}
    assert np.array_equal(back.weights.codes, qh.weights.codes)
    assert back.weights.scale == qh.weights.scale and back.biases.zero_point == qh.biases.zero_point
    save_head(tmp_path / "r.npz", head)
    plain, _ = load_head(tmp_path / "r.npz")
    assert isinstance(plain, SoftmaxHead) and np.array_equal(plain.weights, head.weights)

import numpy as np
import pytest

from errors import NonFiniteError, QuantAuditError, ShapeMismatchError
from quant import (PER_ROW_GROUP, Int4GroupScheme, Int8ChannelScheme, fake_quant, gap, int4_group_params,
                   int4_scale_map, parse_scheme, probe_gap, quantize_model, quantize_tensor_group,
                   quantize_tensor_int4, quantize_tensor_int8)
from tests.conftest import PUBLISHED


def fixture_suite(n=1000, seed=0):
    """Zero-mean Gaussian tensors of assorted shapes; every group straddles zero."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        d_out = int(rng.integers(32, 64))
        d_in = int(rng.integers(1, 300))
        scale = float(rng.uniform(1e-3, 10.0))
        yield (rng.standard_normal((d_out, d_in)) * scale).astype(np.float32)


def test_int4_error_is_within_one_group_scale():
    scheme = Int4GroupScheme()
    for W in fixture_suite():
        w = W.astype(np.float64)
        err = np.abs(quantize_tensor_int4(W, scheme).astype(np.float64) - w)
        s = int4_scale_map(W, scheme)
        assert np.all(err <= s * (1 + 1e-5) + 1e-6 * np.abs(w))


def test_int8_error_is_within_half_a_channel_scale():
    for W in fixture_suite(n=200, seed=1):
        w = W.astype(np.float64)
        s = np.abs(w).max(axis=1, keepdims=True) / 127
        err = np.abs(quantize_tensor_int8(W).astype(np.float64) - w)
        assert np.all(err <= s / 2 * (1 + 1e-5) + 1e-6 * np.abs(w))


def test_more_levels_never_increase_group_mse():
    for W in fixture_suite(n=300, seed=2):
        w = W.astype(np.float64)
        mse16 = np.mean((quantize_tensor_group(W, q_max=15) - w) ** 2)
        mse256 = np.mean((quantize_tensor_group(W, q_max=255) - w) ** 2)
        assert mse256 <= mse16


def test_fake_quant_is_idempotent(rng):
    w = rng.standard_normal(1000)
    params = int4_group_params(w)
    once = fake_quant(w, params.scale, params.zero_point, 0, 15)
    twice = fake_quant(once, params.scale, params.zero_point, 0, 15)
    assert np.array_equal(once, twice)


def test_grid_resident_tensor_round_trips_exactly(rng):
    grid = np.arange(16) * 0.25 - 1.0  # s = 0.25, z = 4
    W = np.stack([rng.permutation(grid) for _ in range(4)]).astype(np.float32)
    params = int4_group_params(W)
    assert params.scale == 0.25
    assert params.zero_point == 4
    assert np.array_equal(quantize_tensor_int4(W, Int4GroupScheme(group_size=16)), W)


def test_group_params_of_a_simple_range():
    params = int4_group_params([-1.5, 0.0, 6.0])
    assert params.scale == pytest.approx(0.5)
    assert params.zero_point == 3
    assert not params.degenerate


def test_constant_group_is_left_unchanged():
    W = np.full((4, 8), 0.75, dtype=np.float32)
    assert np.array_equal(quantize_tensor_int4(W), W)
    assert np.isnan(int4_scale_map(W)).all()
    assert int4_group_params(W).degenerate


def test_all_zero_rows_survive_int8():
    W = np.zeros((3, 5), dtype=np.float32)
    W[1] = [1, -2, 3, -4, 5]
    out = quantize_tensor_int8(W)
    assert np.array_equal(out[0], np.zeros(5))
    assert np.allclose(out[1], W[1], atol=5 / 127)


def test_partial_final_group(rng):
    W = rng.standard_normal((16, 130)).astype(np.float32)
    scales = int4_scale_map(W, Int4GroupScheme(group_size=128))
    assert len(np.unique(scales[:, :128])) == 1
    assert len(np.unique(scales[:, 128:])) == 1
    assert scales[0, 0] != scales[0, 129]


def test_per_row_group_scope_gives_each_row_its_scale():
    W = np.array([[0.0, 1.5], [0.0, 15.0]], dtype=np.float32)
    scales = int4_scale_map(W, Int4GroupScheme(group_size=2, scale_scope=PER_ROW_GROUP))
    assert scales[0, 0] == pytest.approx(0.1)
    assert scales[1, 0] == pytest.approx(1.0)
    assert np.allclose(quantize_tensor_int4(W, Int4GroupScheme(group_size=2, scale_scope=PER_ROW_GROUP)), W)


def test_non_finite_input_is_rejected():
    W = np.ones((2, 4), dtype=np.float32)
    W[0, 1] = np.nan
    with pytest.raises(NonFiniteError):
        quantize_tensor_int4(W)
    with pytest.raises(NonFiniteError):
        quantize_tensor_int8(W)


def test_one_dimensional_input_is_rejected():
    with pytest.raises(ShapeMismatchError):
        quantize_tensor_int4(np.ones(8, dtype=np.float32))


def test_quantize_model_touches_only_selected_tensors(rng):
    tensors = {
        "blocks.0.mlp.fc.weight": rng.standard_normal((32, 16)).astype(np.float32),
        "blocks.0.mlp.fc.bias": rng.standard_normal(32).astype(np.float32),
        "tok_embed.weight": rng.standard_normal((10, 16)).astype(np.float32),
    }
    out = quantize_model(tensors)
    assert out["tok_embed.weight"] is tensors["tok_embed.weight"]
    assert out["blocks.0.mlp.fc.bias"] is tensors["blocks.0.mlp.fc.bias"]
    assert not np.array_equal(out["blocks.0.mlp.fc.weight"], tensors["blocks.0.mlp.fc.weight"])
    threaded = quantize_model(tensors, threads=4)
    assert all(np.array_equal(out[k], threaded[k]) for k in tensors)


def test_gap_sign_and_value():
    assert gap(100.0, 105.0) == pytest.approx(5.0)
    assert gap(100.0, 99.0) == pytest.approx(-1.0)
    record = probe_gap(40.0, 50.0)
    assert record.gap_pct == pytest.approx(25.0)
    with pytest.raises(QuantAuditError):
        gap(0.0, 1.0)


@pytest.mark.parametrize("step, ppl, int4_gap, _", PUBLISHED)
def test_published_gaps_are_self_consistent(step, ppl, int4_gap, _):
    ppl_int4 = round(ppl * (1 + int4_gap / 100), 1)
    assert abs(gap(ppl, ppl_int4) - int4_gap) <= 0.5


def test_parse_scheme():
    assert parse_scheme("int4", group_size=64).group_size == 64
    assert isinstance(parse_scheme("int8"), Int8ChannelScheme)
    with pytest.raises(QuantAuditError):
        parse_scheme("int3")

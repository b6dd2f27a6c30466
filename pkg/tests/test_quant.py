import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantaudit.quant import (
    GapRecord, Int4GroupScheme, Int8ChannelScheme, QuantError, fake_quant, gap,
    int4_group_params, quantize_model, quantize_tensor_int4, quantize_tensor_int8,
)
from quantaudit.weightstore import QuantSelector


# ---------------------------------------------------------------------------
# group params (scale / zero-point)

def test_group_params_simple_range():
    p = int4_group_params(np.array([0.0, 1.5]))
    assert p.scale == pytest.approx(0.1)
    assert p.zero_point == 0
    assert not p.degenerate


def test_group_params_negative_min():
    p = int4_group_params(np.array([-1.0, 2.0]))
    assert p.scale == pytest.approx(0.2)
    assert p.zero_point == 5


def test_group_params_constant_group_degenerate():
    p = int4_group_params(np.array([0.7, 0.7, 0.7]))
    assert p.degenerate


def test_group_params_rejects_nan():
    with pytest.raises(QuantError):
        int4_group_params(np.array([0.0, np.nan]))


# ---------------------------------------------------------------------------
# fake quantization

def test_fake_quant_rounding():
    assert fake_quant(np.array([0.07]), 0.1, 0, 0, 15)[0] == pytest.approx(0.1)


def test_fake_quant_clamps():
    assert fake_quant(np.array([10.0]), 0.1, 0, 0, 15)[0] == pytest.approx(1.5)


def test_fake_quant_grid_fixed_point():
    assert fake_quant(np.array([0.4]), 0.1, 0, 0, 15)[0] == pytest.approx(0.4)


def test_fake_quant_rejects_bad_scale():
    with pytest.raises(QuantError):
        fake_quant(np.array([1.0]), 0.0, 0, 0, 15)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_fake_quant_idempotent(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=rng.uniform(0.01, 10), size=64)
    s = float(rng.uniform(1e-3, 1.0))
    z = int(rng.integers(0, 16))
    once = fake_quant(w, s, z, 0, 15)
    np.testing.assert_array_equal(fake_quant(once, s, z, 0, 15), once)


# ---------------------------------------------------------------------------
# per-group INT4 tensor quantization

def test_int4_grid_tensor_exact():
    grid = np.linspace(-0.3, 1.2, 16)
    W = np.tile(grid, (4, 2)).astype(np.float32)  # d_in=32, every value on grid
    out = quantize_tensor_int4(W, Int4GroupScheme(group_size=32))
    np.testing.assert_allclose(out, W, atol=1e-7)


def test_int4_rejects_1d():
    with pytest.raises(QuantError):
        quantize_tensor_int4(np.zeros(8))


def test_int4_partial_last_group():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 130))
    scheme = Int4GroupScheme(group_size=128)
    out = quantize_tensor_int4(W, scheme)
    # second group covers columns 128..129 with its own params
    expected_tail = fake_quant(
        W[:, 128:],
        int4_group_params(W[:, 128:]).scale,
        int4_group_params(W[:, 128:]).zero_point,
        0, 15,
    )
    np.testing.assert_allclose(out[:, 128:], expected_tail, rtol=1e-6)


def _max_group_errors(W, out, g):
    errors = []
    for start in range(0, W.shape[1], g):
        block = W[:, start:start + g]
        p = int4_group_params(block)
        err = np.abs(out[:, start:start + g].astype(np.float64) - block)
        errors.append((err.max(), p.scale))
    return errors


@pytest.mark.parametrize("seed", range(8))
def test_int4_error_bounded_by_group_scale(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 40, size=2))
    W = rng.normal(scale=rng.uniform(0.01, 5), size=shape)
    g = int(rng.integers(1, shape[1] + 1))
    out = quantize_tensor_int4(W, Int4GroupScheme(group_size=g))
    for err, scale in _max_group_errors(W, out, g):
        assert err <= scale + 1e-9


def test_int4_per_row_group_scope():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(6, 16))
    out = quantize_tensor_int4(W, Int4GroupScheme(group_size=8, scale_scope="per_row_group"))
    for j in range(6):
        for start in (0, 8):
            row = W[j, start:start + 8]
            p = int4_group_params(row)
            np.testing.assert_allclose(out[j, start:start + 8],
                                       fake_quant(row, p.scale, p.zero_point, 0, 15),
                                       rtol=1e-6)


def test_int4_degenerate_group_exact():
    W = np.full((3, 8), 0.7, dtype=np.float32)
    out = quantize_tensor_int4(W, Int4GroupScheme(group_size=8))
    np.testing.assert_array_equal(out, W)


# ---------------------------------------------------------------------------
# per-channel INT8

def test_int8_grid_row_exact():
    W = np.array([[-1.27, 1.27]])
    out = quantize_tensor_int8(W)
    np.testing.assert_allclose(out, W, atol=1e-9)


def test_int8_zero_row_passthrough():
    W = np.vstack([np.zeros(8), np.ones(8)])
    out = quantize_tensor_int8(W)
    np.testing.assert_array_equal(out[0], np.zeros(8))


@pytest.mark.parametrize("seed", range(8))
def test_int8_error_bounded_by_half_scale(seed):
    rng = np.random.default_rng(100 + seed)
    W = rng.normal(scale=rng.uniform(0.01, 5), size=(12, 33))
    out = quantize_tensor_int8(W).astype(np.float64)
    scales = np.abs(W).max(axis=1) / 127
    err = np.abs(out - W)
    assert np.all(err <= scales[:, None] / 2 + 1e-12)


# ---------------------------------------------------------------------------
# whole-checkpoint quantization

def _toy_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "attn.w": rng.normal(size=(16, 24)).astype(np.float32),
        "mlp.w": rng.normal(size=(8, 8)).astype(np.float32),
        "ln.norm": rng.normal(size=(16,)).astype(np.float32),
        "tok_embed.weight": rng.normal(size=(32, 16)).astype(np.float32),
    }


def test_quantize_model_passthrough_when_nothing_selected():
    tensors = _toy_tensors()
    sel = QuantSelector(include_patterns=["nothing*"])
    out = quantize_model(tensors, sel, Int4GroupScheme(group_size=8))
    for name in tensors:
        np.testing.assert_array_equal(out[name], tensors[name])


def test_quantize_model_changes_only_selected():
    tensors = _toy_tensors()
    out = quantize_model(tensors, QuantSelector(), Int8ChannelScheme())
    np.testing.assert_array_equal(out["ln.norm"], tensors["ln.norm"])
    np.testing.assert_array_equal(out["tok_embed.weight"], tensors["tok_embed.weight"])
    scales = np.abs(tensors["attn.w"].astype(np.float64)).max(axis=1) / 127
    err = np.abs(out["attn.w"].astype(np.float64) - tensors["attn.w"])
    assert np.all(err <= scales[:, None] / 2 + 1e-6)


def test_quantize_model_deterministic():
    tensors = _toy_tensors()
    a = quantize_model(tensors, QuantSelector(), Int4GroupScheme(group_size=8))
    b = quantize_model(tensors, QuantSelector(), Int4GroupScheme(group_size=8))
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


# ---------------------------------------------------------------------------
# gap metric

def test_gap_examples():
    assert gap(100, 150) == pytest.approx(50.0)
    assert gap(3.7, 3.7) == 0.0


def test_gap_reference_row():
    # ppl_fp 35.3 with a 517.1% gap implies ppl_q ~= 217.9
    assert gap(35.3, 217.9) == pytest.approx(517.3, abs=0.5)


def test_gap_rejects_nonpositive():
    with pytest.raises(QuantError):
        gap(0.0, 1.0)


def test_gap_record_invariant():
    rec = GapRecord(ppl_fp=40.0, ppl_q=44.0)
    assert rec.gap_pct == pytest.approx(10.0, rel=1e-9)


# ---------------------------------------------------------------------------
# bit-width monotonicity

@pytest.mark.parametrize("seed", range(5))
def test_more_levels_never_increase_mse(seed):
    rng = np.random.default_rng(400 + seed)
    W = rng.normal(size=(16, 48))
    out16 = quantize_tensor_int4(W, Int4GroupScheme(group_size=16))
    out256 = quantize_tensor_int4(W, Int4GroupScheme(group_size=16, q_max=255))
    mse16 = np.mean((out16.astype(np.float64) - W) ** 2)
    mse256 = np.mean((out256.astype(np.float64) - W) ** 2)
    assert mse256 <= mse16

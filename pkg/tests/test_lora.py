from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bitrom_sim.errors import CorruptionError, ValidationError
from bitrom_sim.lora import (
    PROJECTIONS,
    LoraAdapter,
    apply_adapter,
    dequantize_adapter,
    dump_adapter,
    load_adapter,
    load_adapter_bytes,
    op_fraction,
    pack_signed_row,
    param_fraction,
    quantize_adapter,
    quantize_matrix,
    save_adapter,
    unpack_signed_row,
)
from bitrom_sim.ternary import FALCON3, ModelConfig, quantize_activations

VOD = ("Value", "Output", "Down")
matrices = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                      elements=st.floats(-1e3, 1e3))


def test_zero_and_endpoint_codes():
    ad = quantize_adapter(np.zeros((4, 2)), np.zeros((2, 3)))
    assert not ad.A.any() and ad.scale_a == 1.0 and ad.scale_b == 1.0
    codes, _ = quantize_matrix([[2.0, -2.0, 0.5]], 6)
    assert codes.tolist() == [[31, -31, 8]]
    with pytest.raises(ValidationError):
        quantize_adapter(np.ones((2, 2)), np.ones((2, 2)), bits=1)


@given(matrices, st.integers(2, 8))
def test_quantization_error_bound(m, bits):
    codes, scale = quantize_matrix(m, bits)
    err = np.abs(codes * scale - m)
    assert (err <= scale / 2 * (1 + 1e-9) + 1e-12).all()


def test_identity_paths(rng):
    x = quantize_activations(rng.standard_normal(4), 8)
    base = rng.standard_normal(3)
    zero = quantize_adapter(np.zeros((4, 2)), np.zeros((2, 3)))
    assert np.array_equal(apply_adapter(x, zero, base), base)
    ad = quantize_adapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 3)), alpha=0)
    assert np.array_equal(apply_adapter(x, ad, base), base)
    with pytest.raises(ValidationError):
        apply_adapter(x, ad, base[:2])


def test_rank_one_by_hand():
    ad = LoraAdapter(np.array([[31], [0]]), np.array([[0, 31]]), 0.5, 0.25, alpha=1.0)
    x = quantize_activations([1.0, 0.0], 8)
    out = apply_adapter(x, ad, np.array([1.0, 2.0]))
    # deq A = 15.5 e_1, deq B = 7.75 e_2, x = e_1
    assert out.tolist() == pytest.approx([1.0, 2.0 + 15.5 * 7.75])


def test_random_against_exact_rationals(rng):
    for _ in range(20):
        d_in, r, d_out = 7, 3, 5
        ad = quantize_adapter(rng.standard_normal((d_in, r)), rng.standard_normal((r, d_out)), alpha=8.0)
        x = quantize_activations(rng.standard_normal(d_in), 8)
        base = rng.standard_normal(d_out)
        got = apply_adapter(x, ad, base)
        A, B = dequantize_adapter(ad)
        xs = [Fraction(float(v)) * Fraction(x.scale) for v in x.values]
        for j in range(d_out):
            h = [sum(xs[i] * Fraction(float(A[i, q])) for i in range(d_in)) for q in range(r)]
            y = sum(h[q] * Fraction(float(B[q, j])) for q in range(r))
            want = Fraction(base[j]) + Fraction(ad.alpha) / r * y
            assert got[j] == pytest.approx(float(want), rel=1e-12, abs=1e-12)


def test_table_parameter_fractions():
    want = {"Falcon3-1B": 0.30, "Falcon3-3B": 0.25, "Falcon3-7B": 0.22, "Falcon3-10B": 0.23}
    for name, pct in want.items():
        assert abs(param_fraction(VOD, 16, FALCON3[name]) - pct) <= 0.02
    assert abs(param_fraction(PROJECTIONS, 16, FALCON3["Falcon3-7B"]) - 0.59) <= 0.02


def test_placement_rows_7b():
    m = FALCON3["Falcon3-7B"]
    assert round(param_fraction("QKGU", 16, m), 3) == 0.375
    assert round(param_fraction("D", 16, m), 3) == 0.157
    assert round(param_fraction("OD", 16, m), 3) == 0.194


@given(st.integers(0, 64), st.sampled_from(list(FALCON3)))
def test_param_fraction_linear_in_rank(r, name):
    m = FALCON3[name]
    assert param_fraction(VOD, 2 * r, m) == pytest.approx(2 * param_fraction(VOD, r, m))
    if r == 0:
        assert param_fraction(VOD, r, m) == 0


def test_op_fraction():
    sq = ModelConfig("sq", 1, 2048, 2048, 8, 8, 256, vocab_size=1)
    assert op_fraction(["Query"], 16, sq)["per_projection"]["Query"] == pytest.approx(1.5625)
    assert op_fraction(["Query"], 0, sq)["aggregate_weighted"] == 0
    down = op_fraction(["Down"], 16, FALCON3["Falcon3-7B"])["per_projection"]["Down"]
    assert down == pytest.approx(0.59, abs=0.01)
    with pytest.raises(ValidationError):
        op_fraction(["Nope"], 16, sq)


@given(st.integers(2, 12), st.data())
def test_signed_row_roundtrip(bits, data):
    lim = (1 << (bits - 1)) - 1
    row = data.draw(st.lists(st.integers(-lim - 1, lim), max_size=40))
    raw = pack_signed_row(row, bits)
    assert len(raw) == (len(row) * bits + 7) // 8
    assert unpack_signed_row(raw, len(row), bits).tolist() == row


def test_adapter_file(tmp_path, rng):
    ad = quantize_adapter(rng.standard_normal((9, 4)), rng.standard_normal((4, 6)), alpha=32.0)
    path = tmp_path / "a.lora"
    save_adapter(path, ad)
    back = load_adapter(path)
    assert np.array_equal(back.A, ad.A) and np.array_equal(back.B, ad.B)
    assert (back.scale_a, back.scale_b, back.alpha, back.bits) == (ad.scale_a, ad.scale_b, ad.alpha, ad.bits)
    raw = dump_adapter(ad)
    with pytest.raises(CorruptionError):
        load_adapter_bytes(raw[:-1])
    with pytest.raises(CorruptionError):
        load_adapter_bytes(b"NOPE" + raw[4:])

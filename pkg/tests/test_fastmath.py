import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnlab import fastmath as fm
from attnlab.fastmath import Method, Poly2x


def f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def bf16_rne_oracle(x: float) -> int:
    """Pick the nearer of the two bf16 neighbours with plain integers; ties to even."""
    u = f32_bits(x)
    lo = u >> 16
    rem = u & 0xFFFF
    if rem > 0x8000 or (rem == 0x8000 and lo & 1):
        lo += 1
    return lo & 0xFFFF


finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("degree", [3, 4, 5])
def test_fit_pins_constant_and_is_deterministic(degree):
    p = fm.fit_minimax(degree)
    assert p.coeffs[0] == 1.0
    assert len(p.coeffs) == degree + 1
    fm.fit_minimax.cache_clear()
    assert fm.fit_minimax(degree) == p


@pytest.mark.parametrize("degree,bound", [(3, 1.2e-4), (4, 5e-6), (5, 3e-7)])
def test_fit_error_on_dense_grid(degree, bound):
    p = fm.fit_minimax(degree)
    x = np.linspace(0.0, 1.0, 1 << 18, endpoint=False)
    err = np.abs(p.rel_error(x)).max()
    assert err <= p.certified_max_rel_err <= bound


def test_degree_ordering_of_certified_bounds():
    b = [fm.fit_minimax(d).certified_max_rel_err for d in (3, 4, 5)]
    assert b[0] > b[1] > b[2]


def test_fit_rejects_bad_degree():
    with pytest.raises(ValueError):
        fm.fit_minimax(2)


def test_poly_json_round_trip():
    p = fm.fit_minimax(4)
    assert Poly2x.from_json(p.to_json()) == p


@pytest.mark.parametrize(
    "kw",
    [
        dict(degree=3, coeffs=(0.5, 0.7, 0.2, 0.08)),
        dict(degree=3, coeffs=(1.0, 0.7, 0.2)),
        dict(degree=6, coeffs=(1.0,) * 7),
        dict(degree=3, coeffs=(1.0, 0.1, 0.2, 0.3)),  # 0.1 is not a float32
    ],
)
def test_poly_validation(kw):
    with pytest.raises(ValueError):
        Poly2x(**kw)


@pytest.mark.parametrize("degree", [3, 4, 5])
def test_exp2_emulated_fixed_points(degree):
    p = fm.fit_minimax(degree)
    assert fm.exp2_emulated(np.float32(0.0), p) == 1.0
    assert fm.exp2_emulated(np.float32(3.0), p) == 8.0
    assert fm.exp2_emulated(np.float32(-200.0), p) == fm.exp2_emulated(np.float32(-127.0), p)


def test_exp2_emulated_half():
    p = fm.fit_minimax(3)
    y = float(fm.exp2_emulated(np.float32(0.5), p))
    assert abs(y / math.sqrt(2.0) - 1.0) <= p.kernel_error_bound()


@pytest.mark.parametrize("degree", [3, 4, 5])
def test_exact_on_integers(degree):
    x = np.arange(-126, 128, dtype=np.float32)
    y = fm.exp2_emulated(x, fm.fit_minimax(degree))
    assert np.array_equal(y.astype(np.float64), np.exp2(x.astype(np.float64)))


@pytest.mark.parametrize("degree", [3, 4, 5])
def test_monotone_on_sorted_samples(degree):
    x = np.sort(np.random.default_rng(1).uniform(-126, 127, 10**6).astype(np.float32))
    y = fm.exp2_emulated(x, fm.fit_minimax(degree))
    assert np.all(np.diff(y) >= 0)


def test_floor_magic_matches_math_floor():
    x = np.random.default_rng(2).uniform(-127, 127, 10**6).astype(np.float32)
    x = np.concatenate([x, np.arange(-127, 128, dtype=np.float32), np.float32([-0.5, -1e-7, 1e-7, 126.99999])])
    expect = np.floor(x.astype(np.float64))
    assert np.array_equal(fm.floor_magic(x).astype(np.float64), expect)


@given(st.floats(min_value=-127, max_value=127, width=32))
def test_floor_magic_property(x):
    assert float(fm.floor_magic(np.float32(x))) == math.floor(x)


@given(st.floats(min_value=-126, max_value=127, width=32))
@settings(max_examples=300)
def test_emulated_within_kernel_bound(x):
    p = fm.fit_minimax(3)
    y = float(fm.exp2_emulated(np.float32(x), p))
    exact = 2.0 ** float(x)
    assert abs(y - exact) / exact <= p.kernel_error_bound()


def test_exp2_reference_examples():
    assert fm.exp2_reference(np.float32(1.0)) == 2.0
    assert fm.exp2_reference(np.float32(0.0)) == 1.0
    assert fm.exp2_reference(np.float32(0.25)) == np.float32(2.0**0.25)


@given(st.floats(min_value=-100, max_value=100, width=32))
def test_exp2_reference_is_correctly_rounded(x):
    y = fm.exp2_reference(np.float32(x))
    exact = 2.0 ** float(x)
    lo, hi = np.nextafter(y, np.float32(-np.inf)), np.nextafter(y, np.float32(np.inf))
    assert abs(float(y) - exact) <= min(abs(float(lo) - exact), abs(float(hi) - exact))


@given(finite_f32)
def test_bf16_matches_integer_oracle(x):
    assert int(fm.round_to_bf16_bits(np.float32(x))) == bf16_rne_oracle(x)


def test_bf16_examples():
    assert fm.round_to_bf16(np.float32(1.0)) == fm.Bf16Value(0x3F80)
    r = fm.round_to_bf16(np.float32(math.sqrt(2.0))).to_float32()
    assert abs(float(r) / math.sqrt(2.0) - 1.0) <= fm.BF16_EPS


def test_bf16_ties_go_to_even():
    # 1 + 2^-8 sits exactly between 1 and 1 + 2^-7
    assert fm.bf16_round_trip(np.float32(1 + 2**-8)) == 1.0
    assert fm.bf16_round_trip(np.float32(1 + 3 * 2**-8)) == np.float32(1 + 2**-6)


@given(st.integers(min_value=0, max_value=0xFFFF))
def test_bf16_representable_values_are_fixed(bits):
    f = fm.bf16_bits_to_float32(np.uint16(bits))
    if np.isfinite(f):
        assert int(fm.round_to_bf16_bits(f)) == bits


@given(st.floats(min_value=1e-30, max_value=1e30))
def test_float64_to_bf16_single_rounding(x):
    q = float(fm.float64_to_bf16(x))
    m, e = math.frexp(x)
    step = 2.0 ** (e - 8)
    assert abs(q - x) <= step / 2
    assert q == round(x / step) * step


def test_accuracy_sweep_invariants():
    for m in Method:
        r = fm.accuracy_sweep(m, 1 << 16, seed=3)
        assert r.check() == []
        assert r.n_samples == 1 << 16
    hw = fm.accuracy_sweep(Method.HARDWARE_LIKE, 1 << 16)
    assert hw.fp32_max_rel <= 2.0**-23
    ideal = fm.accuracy_sweep(Method.IDEAL_ROUND, 1 << 16)
    assert math.isnan(ideal.fp32_max_rel)


def test_accuracy_sweep_rejects_zero_samples():
    with pytest.raises(ValueError):
        fm.accuracy_sweep(Method.POLY_DEGREE_3, 0)


def test_accuracy_sweep_is_seeded():
    a = fm.accuracy_sweep(Method.POLY_DEGREE_3, 4096, seed=7)
    b = fm.accuracy_sweep(Method.POLY_DEGREE_3, 4096, seed=7)
    assert a == b


def test_bf16_error_dominates_polynomial_error():
    hw = fm.accuracy_sweep(Method.HARDWARE_LIKE, 1 << 18).bf16_max_rel
    for d in (3, 4, 5):
        r = fm.accuracy_sweep(Method.for_degree(d), 1 << 18)
        assert abs(r.bf16_max_rel - hw) <= 2e-4


def test_csv_round_trip():
    reports = [fm.accuracy_sweep(m, 2048) for m in Method]
    text = fm.reports_to_csv(reports)
    back = fm.reports_from_csv(text)
    assert len(back) == len(reports)
    for a, b in zip(reports, back):
        assert a.method is b.method
        assert (math.isnan(a.fp32_max_rel) and math.isnan(b.fp32_max_rel)) or a.fp32_max_rel == b.fp32_max_rel
        assert a.bf16_max_rel == b.bf16_max_rel
    assert "---" in text

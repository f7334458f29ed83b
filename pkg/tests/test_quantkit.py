import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from edgewatch.errors import EmptyInput, NonFiniteValue
from edgewatch.quantkit import (
    HEADER_BYTES,
    AffineQuantizer,
    MagnitudePruner,
    QuantizedTensor,
    dequantize,
    prune_magnitude,
    quantize_affine,
    storage_footprint,
)


def exact_affine(values, qmax=255):
    """Rational-arithmetic oracle for the zero-inclusive affine quantizer."""
    vals = [Fraction(v) for v in values]
    lo, hi = min(Fraction(0), min(vals)), max(Fraction(0), max(vals))
    if lo == hi:
        return Fraction(1), 0, [0] * len(vals)
    scale = (hi - lo) / qmax

    def half_even(x):
        fl = math.floor(x)
        diff = x - fl
        if diff > Fraction(1, 2):
            return fl + 1
        if diff < Fraction(1, 2):
            return fl
        return fl if fl % 2 == 0 else fl + 1

    zp = min(qmax, max(0, half_even(-lo / scale)))
    qs = [min(qmax, max(0, half_even(v / scale) + zp)) for v in vals]
    return scale, zp, qs


def test_all_zero_input_is_degenerate():
    qt = quantize_affine([0.0, 0.0, 0.0])
    assert qt.scale == 1.0
    assert (qt.q_values == qt.zero_point).all()
    assert dequantize(qt).tolist() == [0.0, 0.0, 0.0]


def test_symmetric_input_matches_hand_computation():
    qt = quantize_affine([-1.0, 0.0, 1.0])
    assert qt.scale == pytest.approx(2 / 255)
    assert qt.zero_point == 128  # 127.5 rounds half to even
    scale, zp, qs = exact_affine([-1.0, 0.0, 1.0])
    assert (zp, qs) == (qt.zero_point, qt.q_values.tolist())
    err = np.abs(dequantize(qt) - np.array([-1.0, 0.0, 1.0]))
    assert err.max() <= qt.scale / 2 + 4 * np.spacing(1.0)


def test_positive_constant_forces_zero_into_range():
    qt = quantize_affine([5.0, 5.0])
    assert qt.scale == pytest.approx(5 / 255)
    assert qt.zero_point == 0
    assert qt.q_values.tolist() == [255, 255]
    assert dequantize(qt).tolist() == [5.0, 5.0]


@pytest.mark.parametrize("values", [[], np.array([])])
def test_empty_input_rejected(values):
    with pytest.raises(EmptyInput):
        quantize_affine(values)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(NonFiniteValue):
        quantize_affine([1.0, bad])


def test_only_eight_bits_supported():
    with pytest.raises(ValueError):
        quantize_affine([1.0], bit_width=4)


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(finite, min_size=1, max_size=40))
def test_matches_rational_oracle(values):
    # below ~1e-300 the float scale is itself subnormal and cannot track the oracle
    assume(max(abs(v) for v in values) == 0 or max(abs(v) for v in values) > 1e-300)
    qt = quantize_affine(values)
    scale, zp, qs = exact_affine(values)
    assert qt.zero_point == zp
    # float division may land on the other side of an exact .5 tie
    diffs = np.abs(qt.q_values.astype(int) - np.array(qs))
    assert diffs.max() <= 1
    assert qt.scale == pytest.approx(float(scale), rel=1e-12)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 64), elements=finite))
def test_reconstruction_within_half_step(v):
    qt = quantize_affine(v)
    d = dequantize(qt)
    eps = 4 * np.spacing(np.maximum(np.abs(v), np.abs(d)))
    assert np.all(np.abs(v - d) <= qt.scale / 2 + eps)
    # zero is exactly representable
    assert ((np.arange(256) - qt.zero_point) * qt.scale == 0).any()


def test_dequantize_of_zero_point_is_zero():
    qt = QuantizedTensor(np.full(5, 17), 0.3, 17, 8, 5)
    assert dequantize(qt).tolist() == [0.0] * 5


def test_tensor_invariants_enforced():
    with pytest.raises(ValueError):
        QuantizedTensor(np.array([256]), 1.0, 0, 8, 1)
    with pytest.raises(ValueError):
        QuantizedTensor(np.array([1]), 0.0, 0, 8, 1)
    with pytest.raises(ValueError):
        QuantizedTensor(np.array([1]), 1.0, 300, 8, 1)


def test_wire_format_layout():
    qt = quantize_affine([-1.0, 0.0, 1.0])
    raw = qt.to_bytes()
    assert len(raw) == 1 + 8 + 4 + 8 + 3
    assert raw[0] == 8
    assert int.from_bytes(raw[1:9], "big") == 3
    assert int.from_bytes(raw[9:13], "big", signed=True) == 128
    assert raw[21:] == bytes([0, 128, 255])
    assert QuantizedTensor.from_bytes(raw) == qt


def test_wire_format_rejects_truncation():
    raw = quantize_affine([1.0, 2.0]).to_bytes()
    with pytest.raises(ValueError):
        QuantizedTensor.from_bytes(raw[:-1])


# pruning


def test_prune_zero_fraction_is_identity():
    v = [0.1, -0.5, 0.05, 0.9]
    out, rep = prune_magnitude(v, 0.0)
    assert out.tolist() == v
    assert rep.sparsity == 0


def test_prune_full_fraction_zeroes_everything():
    out, rep = prune_magnitude([0.1, -0.5, 0.05, 0.9], 1.0)
    assert out.tolist() == [0.0] * 4
    assert rep.sparsity == 1


def test_prune_half():
    out, rep = prune_magnitude([0.1, -0.5, 0.05, 0.9], 0.5)
    assert out.tolist() == [0.0, -0.5, 0.0, 0.9]
    assert (rep.kept, rep.zeroed) == (2, 2)


def test_prune_ties_lowest_index_first():
    out, _ = prune_magnitude([0.2, -0.2, 0.2, 1.0], 0.5)
    assert out.tolist() == [0.0, 0.0, 0.2, 1.0]


def test_prune_empty_rejected():
    with pytest.raises(EmptyInput):
        prune_magnitude([], 0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_prune_monotone_and_subset(values, f1, f2):
    lo, hi = sorted((f1, f2))
    out_lo, rep_lo = prune_magnitude(values, lo)
    out_hi, rep_hi = prune_magnitude(values, hi)
    assert rep_lo.sparsity <= rep_hi.sparsity
    assert rep_hi.kept + rep_hi.zeroed == len(values)
    v = np.array(values)
    changed = out_hi != v
    assert np.all(out_hi[changed] == 0)
    # whatever survives is untouched and at least as large as anything pruned
    pruned = np.abs(v[(out_hi == 0) & (v != 0)])
    kept = np.abs(v[out_hi != 0])
    if pruned.size and kept.size:
        assert pruned.max() <= kept.min()


# footprint


@pytest.mark.parametrize("kind,n,expected", [
    ("float32", 0, 0),
    ("float32", 1024, 4096),
    ("quantized", 1024, 1044),
])
def test_storage_footprint(kind, n, expected):
    assert storage_footprint(kind, n) == expected


def test_footprint_ratio_at_1024():
    ratio = storage_footprint("quantized", 1024) / storage_footprint("float32", 1024)
    assert ratio == pytest.approx(0.2549, abs=1e-4)
    assert ratio <= 0.26


@given(st.integers(1024, 10**9))
def test_footprint_ratio_bound(n):
    assert storage_footprint("quantized", n) / storage_footprint("float32", n) <= 0.26
    assert storage_footprint("quantized", n) == n + HEADER_BYTES


# estimator wrappers


def test_affine_quantizer_round_trip():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20, 4))
    aq = AffineQuantizer()
    codes = aq.fit_transform(X)
    assert codes.shape == X.shape
    assert codes.min() >= 0 and codes.max() <= 255
    back = aq.inverse_transform(codes)
    assert np.abs(back - X).max() <= aq.scale_ / 2 + 1e-12
    qt = aq.to_tensor(X)
    ref = quantize_affine(X.ravel())
    assert qt == ref


def test_estimator_params_and_clone():
    aq = AffineQuantizer(bit_width=8)
    assert aq.get_params() == {"bit_width": 8}
    assert clone(aq).get_params() == aq.get_params()
    pipe = make_pipeline(MagnitudePruner(fraction=0.5), AffineQuantizer())
    out = pipe.fit_transform(np.array([[0.1, -0.5, 0.05, 0.9]]))
    assert out.shape == (1, 4)
    zp = pipe[-1].zero_point_
    assert out[0, 0] == zp and out[0, 2] == zp


def test_transform_before_fit_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        AffineQuantizer().transform([1.0])

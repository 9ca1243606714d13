import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cqids.qtensor import (QTensor, QuantSpec, act_spec, calibrate_scale, dequantize, fake_quant,
                           quantize, round_half_away, scale_grad, ste_mask, weight_spec)


def test_level_ranges():
    assert (weight_spec(2).lo, weight_spec(2).hi) == (-1, 1)
    assert (weight_spec(3).lo, weight_spec(3).hi) == (-3, 3)
    assert (weight_spec(4).lo, weight_spec(4).hi) == (-7, 7)
    assert (act_spec(2).lo, act_spec(2).hi) == (0, 3)
    assert (act_spec(3).lo, act_spec(3).hi) == (0, 7)
    with pytest.raises(ValueError):
        QuantSpec(5)
    with pytest.raises(ValueError):
        QuantSpec(2, scale=0.0)


def test_quantize_examples():
    s = weight_spec(2, 0.5)
    assert quantize([0.6, -10.0, 0.0], s).values.tolist() == [1, -1, 0]
    s4 = weight_spec(4, 1.0)
    assert quantize([7.4, 7.6], s4).values.tolist() == [7, 7]
    u3 = act_spec(3, 2.0)
    assert quantize([9.0, 20.0], u3).values.tolist() == [5, 7]


def test_round_half_away():
    assert round_half_away([0.5, 1.5, 2.5, -0.5, -2.5, 0.49]).tolist() == [1, 2, 3, -1, -3, 0]


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        quantize([np.nan], weight_spec(2))
    with pytest.raises(ValueError):
        quantize([np.inf], weight_spec(2))


def test_dequantize():
    s = weight_spec(2, 0.5)
    assert dequantize(QTensor([1], s)).tolist() == [0.5]
    assert dequantize(QTensor([0], s)).tolist() == [0.0]
    with pytest.raises(ValueError):
        QTensor([2], s)


specs = st.builds(QuantSpec, st.sampled_from([2, 3, 4, 8]), st.booleans(),
                  st.floats(0.01, 10.0), st.booleans())
tensors = arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3))


@given(tensors, specs)
def test_quantize_in_range(x, spec):
    q = quantize(x, spec).values
    assert q.min() >= spec.lo and q.max() <= spec.hi


@given(tensors, specs)
def test_requantize_idempotent(x, spec):
    once = fake_quant(x, spec)
    assert np.array_equal(fake_quant(once, spec), once)


@given(tensors, specs)
def test_error_bound_inside_range(x, spec):
    inside = (x >= spec.lo * spec.scale) & (x <= spec.hi * spec.scale)
    err = np.abs(fake_quant(x, spec) - x)[inside]
    assert np.all(err <= spec.scale / 2 * (1 + 1e-12))


@given(tensors, st.sampled_from([2, 3, 4, 8]), st.floats(0.01, 10.0))
def test_signed_symmetry(x, bits, scale):
    spec = weight_spec(bits, scale)
    assert np.array_equal(fake_quant(-x, spec), -fake_quant(x, spec))


@given(tensors, specs)
def test_monotone(x, spec):
    xs = np.sort(x)
    assert np.all(np.diff(quantize(xs, spec).values) >= 0)


def test_fake_quant_forward_and_ste():
    s = weight_spec(2, 0.5)
    assert fake_quant([0.6], s).tolist() == [0.5]
    assert ste_mask([0.6], s).tolist() == [1.0]
    assert ste_mask([-10.0], s).tolist() == [0.0]
    # clamp kicks in beyond half a step past the outer level
    assert ste_mask([0.74, 0.76, -0.76], s).tolist() == [1.0, 0.0, 0.0]


def test_ste_matches_finite_differences_away_from_boundaries():
    spec = act_spec(3, 0.25)
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.5, 2.5, 2000)
    h = 1e-6
    r = x / spec.scale
    # keep away from rounding boundaries (half-integers) and clamp edges
    frac = np.abs(r - np.floor(r) - 0.5)
    ok = (frac > 1e-3) & (np.abs(r - spec.hi) > 1e-3) & (np.abs(r - spec.lo) > 1e-3)
    fd = (fake_quant(x + h, spec) - fake_quant(x - h, spec)) / (2 * h)
    # round() is piecewise constant: between boundaries the true derivative is 0
    # while the STE passes 1; past the clamp both are 0.
    outside = ok & ((r < spec.lo - 0.5) | (r > spec.hi + 0.5))
    assert np.all(fd[outside] == 0) and np.all(ste_mask(x[outside], spec) == 0)
    inside = ok & ~outside
    assert np.all(fd[inside] == 0)
    assert np.all(ste_mask(x[inside], spec) == 1)
    # across a boundary the finite difference blows up: the check is meaningless there
    b = (np.arange(1, spec.hi) + 0.5) * spec.scale
    jump = (fake_quant(b + h, spec) - fake_quant(b - h, spec)) / (2 * h)
    assert np.all(jump > 1e3)


def test_scale_gradient_matches_finite_differences():
    # d/ds [s * clamp(round(x/s))] is exact between rounding boundaries
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.2, 3.0, 500)
    s = 0.3
    spec = act_spec(3, s)
    r = x / s
    ok = (np.abs(r - np.floor(r) - 0.5) > 1e-3) & (np.abs(r - spec.hi - 0.5) > 1e-3)
    h = 1e-7
    fd = (fake_quant(x, spec.with_scale(s + h)) - fake_quant(x, spec.with_scale(s - h))) / (2 * h)
    # the learned-step rule adds the -x/s term that the piecewise-constant round hides
    lsq = scale_grad(x, spec)
    q = np.clip(round_half_away(r), spec.lo, spec.hi)
    assert np.allclose(fd[ok], q[ok], atol=1e-5)
    inside = ok & (r >= spec.lo - 0.5) & (r < spec.hi + 0.5)
    assert np.allclose(lsq[inside], (q - r)[inside])
    assert np.all(lsq[r > spec.hi + 0.5] == spec.hi)


def test_calibrate_scale():
    assert calibrate_scale([0.3, -0.1], weight_spec(2)) == pytest.approx(0.3)
    assert calibrate_scale(np.zeros(5), weight_spec(2)) == 1.0
    assert calibrate_scale([14.0, -3.0], weight_spec(4)) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        calibrate_scale([], weight_spec(2))

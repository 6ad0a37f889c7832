import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scaleood import (
    DegenerateSampleError,
    LinearHead,
    ShapingConfig,
    ShapingError,
    activation_sums,
    apply_head,
    percentile_threshold,
    react_threshold,
    shape,
    shape_ash_s,
    shape_batch,
    shape_prune,
    shape_react,
    shape_scale,
)
from scaleood.shaping import batch_scale_factors, nearest_rank

R = 10.0 / 7.0

positive_vectors = arrays(
    np.float64, st.integers(2, 64), elements=st.floats(0.01, 100.0, allow_nan=False, allow_infinity=False), unique=True
)
percentiles = st.floats(0.0, 0.95)
grid_vectors = arrays(np.int64, st.integers(2, 64), elements=st.integers(10, 100_000), unique=True).map(
    lambda v: v / 1000.0
)
scales = st.floats(0.1, 10.0)


def test_percentile_threshold():
    assert percentile_threshold([1, 2, 3, 4], 0.5) == 2
    assert percentile_threshold([4, 3, 2, 1], 0.5) == 2
    assert percentile_threshold([5], 0.9) == 5
    assert percentile_threshold([1, 2, 3], 0.0) == -math.inf


def test_nearest_rank_absorbs_representation_error():
    assert nearest_rank(0.7, 10) == 7
    assert nearest_rank(0.85, 2048) == 1741
    with pytest.raises(ShapingError, match="percentile"):
        nearest_rank(1.0, 4)


def test_activation_sums():
    res = activation_sums([1, 2, 3, 4], 0.5)
    assert (res.sum_all, res.sum_kept) == (10, 7)
    assert res.factor == pytest.approx(1.428571, abs=1e-6)
    res = activation_sums([1, 1, 1, 1], 0.0)
    assert (res.sum_all, res.sum_kept, res.factor) == (4, 4, 1)


def test_degenerate_sample():
    with pytest.raises(DegenerateSampleError, match="Q_p = 0"):
        activation_sums([0, 0, 0, 0], 0.5)
    with pytest.raises(DegenerateSampleError) as exc:
        activation_sums([2, 2, 2], 0.5, index=7)
    assert exc.value.index == 7
    assert "sample 7" in str(exc.value)


def test_scale_factor_overflow_is_degenerate():
    a = np.ones(1000)
    a[-1] = 1.01
    with pytest.raises(DegenerateSampleError, match="overflows"):
        activation_sums(a, 0.999)
    assert shape_batch(a, ShapingConfig("scale", 0.999)).n_degenerate == 1


def test_shape_scale():
    out = shape_scale([1, 2, 3, 4], 0.5)
    np.testing.assert_allclose(out, np.array([1, 2, 3, 4]) * math.exp(R))
    np.testing.assert_allclose(out, [4.1727, 8.3454, 12.5181, 16.6908], atol=1e-4)
    np.testing.assert_allclose(shape_scale([3.0] * 5, 0.0), np.full(5, 3.0 * math.e))


def test_shape_ash_s():
    out = shape_ash_s([1, 2, 3, 4], 0.5)
    np.testing.assert_allclose(out, [0, 0, 12.5181, 16.6908], atol=1e-4)
    np.testing.assert_allclose(shape_ash_s([1.0, 2.0], 0.0), np.array([1.0, 2.0]) * math.e)


def test_shape_prune():
    np.testing.assert_array_equal(shape_prune([1, 2, 3, 4], 0.5), [0, 0, 3, 4])
    np.testing.assert_array_equal(shape_prune([1, 2, 3, 4], 0.0), [1, 2, 3, 4])
    np.testing.assert_array_equal(shape_prune([2, 2, 5], 0.5), [0, 0, 5])


def test_shape_react():
    np.testing.assert_array_equal(shape_react([1, 5, 10], 6), [1, 5, 6])
    np.testing.assert_array_equal(shape_react([1, 5, 10], 10), [1, 5, 10])
    with pytest.raises(ShapingError, match="clip threshold"):
        shape_react([1, 2], 0.0)


def test_react_threshold_clips_about_ten_percent():
    rng = np.random.default_rng(0)
    pooled = np.maximum(rng.normal(1.0, 0.5, (200, 256)), 0.0)
    c = react_threshold(pooled, 0.90)
    clipped = np.mean(pooled > c)
    assert clipped == pytest.approx(0.10, abs=0.005)
    with pytest.raises(ShapingError, match="positive"):
        react_threshold(np.zeros((3, 3)), 0.9)


def test_apply_head():
    head = LinearHead(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(apply_head([1, 2], head), [1, 2])
    head = LinearHead([[1, 1], [1, -1]], [0.5, 0])
    np.testing.assert_array_equal(apply_head([2, 3], head), [5.5, -1])
    with pytest.raises(ShapingError, match="dimension mismatch"):
        apply_head([1, 2, 3], head)


def test_config_validation():
    with pytest.raises(ShapingError, match="Unknown shaping method 'ash_b'"):
        ShapingConfig("ash_b")
    with pytest.raises(ShapingError, match="percentile"):
        ShapingConfig("scale", 1.0)
    with pytest.raises(ShapingError, match="react needs"):
        ShapingConfig("react")


def test_empty_and_non_finite_inputs():
    with pytest.raises(ShapingError, match="empty"):
        shape_scale([], 0.5)
    with pytest.raises(ShapingError, match="finite"):
        shape_prune([1.0, float("nan")], 0.5)


def test_batch_marks_degenerate_rows():
    m = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0], [2.0, 2.0, 2.0, 2.0]])
    res = shape_batch(m, ShapingConfig("scale", 0.5))
    assert res.degenerate.tolist() == [False, True, True]
    assert res.n_degenerate == 2
    assert np.isnan(res.shaped[1]).all()
    np.testing.assert_allclose(res.shaped[0], shape_scale(m[0], 0.5))
    pruned = shape_batch(m, ShapingConfig("prune", 0.5))
    assert pruned.n_degenerate == 0
    np.testing.assert_array_equal(pruned.shaped[2], [0, 0, 0, 0])


@given(a=positive_vectors, p=percentiles)
@settings(max_examples=200, deadline=None)
def test_scale_preserves_order_and_factor_at_least_one(a, p):
    assume(nearest_rank(p, a.size) < a.size)
    res = activation_sums(a, p)
    assert res.factor >= 1.0 - 1e-12
    out = shape_scale(a, p)
    assert np.all(np.diff(out[np.argsort(a)]) >= 0)


@given(a=positive_vectors, p=percentiles)
@settings(max_examples=200, deadline=None)
def test_ash_s_is_scaled_prune(a, p):
    assume(nearest_rank(p, a.size) < a.size)
    r = activation_sums(a, p).factor
    np.testing.assert_allclose(shape_ash_s(a, p), shape_prune(a, p) * math.exp(r), rtol=1e-12)
    thr = percentile_threshold(a, p)
    assert np.all(shape_prune(a, p)[a <= thr] == 0)


@given(a=positive_vectors, p=percentiles)
@settings(max_examples=100, deadline=None)
def test_vector_and_batch_forms_agree(a, p):
    assume(nearest_rank(p, a.size) < a.size)
    batch = batch_scale_factors(np.vstack([a, a[::-1]]), p)
    assert batch.factors[0] == pytest.approx(activation_sums(a, p).factor, rel=1e-12)
    assert batch.factors[1] == pytest.approx(batch.factors[0], rel=1e-12)
    for method in ("scale", "ash_s", "prune"):
        cfg = ShapingConfig(method, p)
        np.testing.assert_array_equal(shape_batch(a, cfg).shaped[0], shape(a, cfg))


def test_scale_keeps_argmax_with_zero_bias():
    rng = np.random.default_rng(5)
    head = LinearHead(rng.normal(size=(10, 64)), np.zeros(10))
    feats = np.maximum(rng.normal(1.0, 0.5, (500, 64)), 0.0)
    raw = np.argmax(apply_head(feats, head), axis=1)
    shaped = shape_batch(feats, ShapingConfig("scale", 0.85))
    ok = ~shaped.degenerate
    assert np.array_equal(np.argmax(apply_head(shaped.shaped[ok], head), axis=1), raw[ok])


@given(a=positive_vectors, p1=percentiles, p2=percentiles)
@settings(max_examples=200, deadline=None)
def test_factor_grows_with_percentile(a, p1, p2):
    lo, hi = sorted((p1, p2))
    assume(nearest_rank(hi, a.size) < a.size)
    sf = batch_scale_factors(np.vstack([a, a]), lo), batch_scale_factors(np.vstack([a, a]), hi)
    assume(not (sf[0].degenerate[0] or sf[1].degenerate[0]))
    assert sf[1].factors[0] >= sf[0].factors[0] * (1 - 1e-12)


@given(a=grid_vectors, p=percentiles, lam=scales)
@settings(max_examples=200, deadline=None)
def test_shaping_is_positively_homogeneous(a, p, lam):
    assume(nearest_rank(p, a.size) < a.size)
    assume(not batch_scale_factors(a, p).degenerate[0])
    for method in ("scale", "ash_s", "prune"):
        cfg = ShapingConfig(method, p)
        np.testing.assert_allclose(shape(lam * a, cfg), lam * shape(a, cfg), rtol=1e-9)
    c = float(np.median(a))
    np.testing.assert_allclose(shape_react(lam * a, lam * c), lam * shape_react(a, c), rtol=1e-12)

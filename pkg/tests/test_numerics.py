import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlglab.numerics import RngStream, l2_norm, linear_combine, row_norms, sample_gaussian, stream_id


def test_zero_variance_gives_zero_vector():
    v = sample_gaussian(4, 0.0, RngStream(1, 2))
    assert v.shape == (4,)
    assert np.all(v == 0)


def test_small_variance_matches_within_chi_square_bound():
    v = sample_gaussian(10**6, 0.001, RngStream(0, 1))
    assert 0.00095 <= np.var(v) <= 0.00105


def test_unit_variance_mean_is_small():
    v = sample_gaussian(10**5, 1.0, RngStream(3, 0))
    assert abs(v.mean()) <= 0.02


@pytest.mark.parametrize("dim", [0, -3])
def test_nonpositive_dim_rejected(dim):
    with pytest.raises(ValueError):
        sample_gaussian(dim, 1.0, RngStream(0, 0))


def test_negative_variance_rejected():
    with pytest.raises(ValueError):
        sample_gaussian(3, -1.0, RngStream(0, 0))


def test_same_seed_and_stream_are_bit_identical():
    a = RngStream(42, 7).normal(1000)
    b = RngStream(42, 7).normal(1000)
    assert a.tobytes() == b.tobytes()


def test_distinct_streams_differ():
    a = RngStream(42, 7).normal(100)
    b = RngStream(42, 8).normal(100)
    c = RngStream(43, 7).normal(100)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_derived_streams_are_stable():
    assert stream_id("init", 3) == stream_id("init", 3)
    assert stream_id("init", 3) != stream_id("init", 4)
    a = RngStream.derive(5, "align", 2).normal(8)
    b = RngStream.derive(5, "align", 2).normal(8)
    assert np.array_equal(a, b)


def test_known_first_draw_is_pinned():
    # guards the documented generator choice against silent library changes
    first = RngStream(0, 0).normal(3)
    again = np.random.Generator(np.random.Philox(key=[0, 0])).standard_normal(3)
    assert np.array_equal(first, again)


@pytest.mark.parametrize("dim", [10**4, 10**5])
def test_gaussian_norm_concentrates(dim):
    for seed in range(5):
        v = sample_gaussian(dim, 1.0, RngStream(seed, 11))
        assert abs(l2_norm(v) - math.sqrt(dim)) / math.sqrt(dim) <= 0.05


def test_l2_norm_examples():
    assert l2_norm([3.0, 4.0]) == 5.0
    assert l2_norm(np.zeros(17)) == 0.0
    for a in (1, 4, 9, 1000):
        assert l2_norm(np.ones(a)) == pytest.approx(math.sqrt(a), rel=1e-15)


def test_row_norms_match_l2_norm():
    m = RngStream(1, 1).normal((6, 5))
    assert np.allclose(row_norms(m), [l2_norm(r) for r in m], rtol=1e-14)


def test_linear_combine_examples():
    v = np.array([1.5, -2.0, 3.25])
    assert np.array_equal(linear_combine([1.0], [v]), v)
    assert np.array_equal(linear_combine([1.0, -1.0], [v, v]), np.zeros(3))
    out = linear_combine([7.5, -6.5], [np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    assert np.array_equal(out, [7.5, -6.5])


def test_linear_combine_rejects_bad_inputs():
    with pytest.raises(ValueError):
        linear_combine([1.0, 1.0], [np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        linear_combine([], [])
    with pytest.raises(ValueError):
        linear_combine([1.0], [np.zeros(2), np.zeros(2)])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=4),
       st.lists(st.integers(-1000, 1000), min_size=3, max_size=3))
def test_linear_combine_exact_on_integers(coeffs, base):
    vectors = [np.array(base, dtype=float) * (i + 1) for i in range(len(coeffs))]
    expected = sum(c * (i + 1) * np.array(base) for i, c in enumerate(coeffs))
    assert np.array_equal(linear_combine([float(c) for c in coeffs], vectors), expected.astype(float))

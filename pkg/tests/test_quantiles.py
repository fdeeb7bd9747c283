import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aqrnn.errors import ConfigError
from aqrnn.quantiles import SubrangeSpec, blend, sample_train_quantile, subrange_weights, weight_matrix
from aqrnn.quantiles import test_grid as grid

SPEC = SubrangeSpec()


def test_default_subranges():
    np.testing.assert_array_equal(SPEC.subranges, [(0.0, 0.3), (0.1, 0.7), (0.5, 1.0)])
    assert SPEC.n == 3


def test_single_subrange_without_knots():
    spec = SubrangeSpec((), 0.1)
    assert spec.subranges == [(0.0, 1.0)]
    assert subrange_weights(0.42, spec) == [(0, 1.0)]


@pytest.mark.parametrize("knots,d", [((0.6, 0.2), 0.1), ((0.2, 0.6), 0.3), ((0.05,), 0.1)])
def test_invalid_specs(knots, d):
    with pytest.raises(ConfigError):
        SubrangeSpec(knots, d)


# indices are 0-based here: team 0 serves (0, 0.3), team 1 (0.1, 0.7), team 2 (0.5, 1)
def test_weight_examples():
    w = dict(subrange_weights(0.15, SPEC))
    assert w == pytest.approx({0: 0.75, 1: 0.25})
    assert subrange_weights(0.4, SPEC) == [(1, 1.0)]
    assert subrange_weights(0.3, SPEC) == [(1, 1.0)]
    assert subrange_weights(0.05, SPEC) == [(0, 1.0)]
    assert subrange_weights(0.95, SPEC) == [(2, 1.0)]


@pytest.mark.parametrize("q", [0.0, 1.0, -0.1, 1.5])
def test_weights_reject_out_of_range(q):
    with pytest.raises(ValueError):
        subrange_weights(q, SPEC)


def test_blend_examples():
    v = np.array([0.3, 0.7])
    np.testing.assert_array_equal(blend(0.05, [v, None, None], SPEC), v)
    assert blend(0.6, [None, np.zeros(1), np.ones(1)], SPEC)[0] == pytest.approx(0.5)
    np.testing.assert_allclose(blend(0.17, [v, v, None], SPEC), v, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        blend(0.15, [v, None, None], SPEC)


@given(st.floats(1e-6, 1 - 1e-6))
def test_weights_form_a_partition(q):
    w = subrange_weights(q, SPEC)
    assert 1 <= len(w) <= 2
    assert sum(x for _, x in w) == pytest.approx(1.0, abs=1e-15)
    assert all(0.0 < x <= 1.0 for _, x in w)


def test_no_subranges_matrix():
    spec = SubrangeSpec((), 0.0)
    np.testing.assert_array_equal(weight_matrix(grid(), spec), np.ones((101, 1)))


def test_evaluation_grid():
    g = grid()
    assert g.size == 101
    assert g[0] == 0.001 and g[-1] == 0.999
    assert np.all(np.diff(g) > 0)
    np.testing.assert_allclose(g[1:-1], np.arange(1, 100) / 100, rtol=0, atol=0)


def test_sample_inside_subrange():
    rng = np.random.default_rng(0)
    q = sample_train_quantile(rng, 0.5, (0.1, 0.7), size=100_000)
    assert q.min() > 0.1 and q.max() < 0.7


def test_sample_mean_symmetric():
    rng = np.random.default_rng(1)
    n = 100_000
    q = sample_train_quantile(rng, 0.5, size=n)
    sigma = np.sqrt(1 / (4 * (2 * 0.5 + 1)) / n)  # Beta(a, a) variance is 1 / (4 (2a + 1))
    assert abs(q.mean() - 0.5) < 3 * sigma


@pytest.mark.parametrize("alpha", [0.0, 1.0, 1.5])
def test_sample_rejects_shape(alpha):
    with pytest.raises(ValueError):
        sample_train_quantile(np.random.default_rng(), alpha)

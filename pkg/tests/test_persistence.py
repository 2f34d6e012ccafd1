import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage import measure

from minkgeom import persistence as ph
from minkgeom.grid_core import Field2D


PROFILE = np.array([[0.0, 1.0, 0.3, 0.6, 0.0]])


def flood_counts(values, thresholds):
    return [measure.label(values > u, connectivity=1).max() for u in thresholds]


def test_constant_field_single_essential_class():
    d = ph.superlevel_persistence_0d(Field2D(np.full((4, 4), 2.0)))
    assert d.births.size == 0
    assert d.has_infinite and len(d) == 1


def test_profile_pairs():
    d = ph.superlevel_persistence_0d(PROFILE)
    assert d.pairs == [(0.6, 0.3)]
    assert d.global_max == 1.0


def test_profile_filtered_count():
    d = ph.superlevel_persistence_0d(PROFILE)
    assert ph.count_components_at(d, 0.5, epsilon=0.05, infinite_cutoff=0.01) == 1
    # the flood fill at 0.5 sees both peaks
    assert flood_counts(PROFILE, [0.5]) == [2]


def test_count_above_max_is_zero():
    d = ph.superlevel_persistence_0d(PROFILE)
    assert ph.count_components_at(d, 1.0) == 0
    assert ph.count_components_at(d, 5.0) == 0


def test_vector_thresholds():
    d = ph.superlevel_persistence_0d(PROFILE)
    np.testing.assert_array_equal(ph.count_components_at(d, [0.1, 0.5, 0.7]), [1, 2, 1])


def test_epsilon_drops_short_lived():
    d = ph.superlevel_persistence_0d(PROFILE)
    assert ph.count_components_at(d, 0.5, epsilon=0.31) == 1
    assert ph.count_components_at(d, 0.5, epsilon=0.29) == 2


def test_negative_epsilon_rejected():
    with pytest.raises(ValueError):
        ph.count_components_at(ph.superlevel_persistence_0d(PROFILE), 0.5, epsilon=-1)


def test_elder_rule_tie_row_major():
    # equal peaks: the one earlier in row-major order survives
    d = ph.superlevel_persistence_0d(np.array([[1.0, 0.0, 1.0]]))
    assert d.pairs == [(1.0, 0.0)]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.integers(0, 5).map(float)))
def test_counts_equal_floodfill_with_ties(values):
    d = ph.superlevel_persistence_0d(values)
    us = np.arange(-0.5, 6.0, 0.5)
    np.testing.assert_array_equal(ph.count_components_at(d, us), flood_counts(values, us))


def test_counts_equal_floodfill_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.random((8, 8))
        d = ph.superlevel_persistence_0d(v)
        us = np.linspace(-0.05, 1.05, 23)
        np.testing.assert_array_equal(ph.count_components_at(d, us), flood_counts(v, us))


def test_lifetimes_non_negative():
    v = np.random.default_rng(1).random((10, 10))
    assert np.all(ph.superlevel_persistence_0d(v).lifetimes >= 0)


# -- lifetime histogram


def _diagram(lifetimes):
    life = np.asarray(lifetimes, dtype=float)
    return ph.PersistenceDiagram(life + 1.0, np.ones_like(life), 10.0, 0.0)


def test_histogram_equal_lifetimes_single_bin():
    h = ph.lifetime_histogram([_diagram([0.3] * 20)], n_bins=10)
    assert np.count_nonzero(h.counts) == 1


def test_histogram_bimodal_knee_between_modes():
    rng = np.random.default_rng(0)
    noise = 0.01 + 0.001 * rng.random(200)
    signal = 1.0 + 0.01 * rng.random(20)
    h = ph.lifetime_histogram([_diagram(noise), _diagram(signal)])
    assert 0.01 < h.knee < 1.0


def test_histogram_errors():
    with pytest.raises(ValueError):
        ph.lifetime_histogram([])
    with pytest.raises(ValueError):
        ph.lifetime_histogram([_diagram([])])


def test_default_epsilon():
    assert ph.DEFAULT_EPSILON == 0.05
    assert ph.DEFAULT_INFINITE_CUTOFF == 0.01
    assert math.isinf(ph.count_components_at.__defaults__[1])

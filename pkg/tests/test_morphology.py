import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sdgmorph.morphology import (StructuringElement, dilate_bruteforce, dilate_flat,
                                 erode_bruteforce, erode_flat, running_extreme_1d)
from sdgmorph.tensor import ContractError


def neighbourhood_reference(v, k, reducer):
    """Per-voxel scan of the in-bounds Chebyshev neighbourhood."""
    r = (k - 1) // 2
    D, H, W = v.shape
    out = np.empty_like(v)
    for z in range(D):
        for y in range(H):
            for x in range(W):
                out[z, y, x] = reducer(v[max(0, z - r):z + r + 1, max(0, y - r):y + r + 1,
                                         max(0, x - r):x + r + 1])
    return out


volumes = arrays(np.float64, st.tuples(st.integers(3, 7), st.integers(3, 7), st.integers(3, 7)),
                 elements=st.integers(0, 255).map(float))


def test_constant_volume_and_identity():
    v = np.full((5, 6, 7), 42.0)
    for k in (1, 3, 5):
        np.testing.assert_array_equal(dilate_flat(v, k), v)
        np.testing.assert_array_equal(erode_flat(v, k), v)
    rnd = np.random.default_rng(0).integers(0, 256, (4, 5, 6)).astype(float)
    np.testing.assert_array_equal(dilate_flat(rnd, 1), rnd)
    np.testing.assert_array_equal(erode_flat(rnd, 1), rnd)


def test_single_bright_and_dark_voxel():
    v = np.zeros((3, 3, 3))
    v[1, 1, 1] = 5
    np.testing.assert_array_equal(dilate_flat(v, 3), np.full((3, 3, 3), 5.0))
    np.testing.assert_array_equal(dilate_flat(v, 3), neighbourhood_reference(v, 3, np.max))
    w = np.full((3, 3, 3), 5.0)
    w[1, 1, 1] = 0
    np.testing.assert_array_equal(erode_flat(w, 3), np.zeros((3, 3, 3)))
    np.testing.assert_array_equal(erode_flat(w, 3), neighbourhood_reference(w, 3, np.min))


def test_rejects_even_or_oversized_element():
    with pytest.raises(ContractError):
        dilate_flat(np.zeros((4, 4, 4)), 2)
    with pytest.raises(ContractError):
        StructuringElement(4)
    with pytest.raises(ContractError):
        erode_flat(np.zeros((2, 4, 4)), 5)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_bruteforce_matches_per_voxel_reference(k):
    v = np.random.default_rng(k).integers(0, 256, (5, 6, 4)).astype(float)
    np.testing.assert_array_equal(dilate_bruteforce(v, k), neighbourhood_reference(v, k, np.max))
    np.testing.assert_array_equal(erode_bruteforce(v, k), neighbourhood_reference(v, k, np.min))


@pytest.mark.parametrize("n,k", [(1, 3), (2, 3), (7, 3), (9, 5), (10, 5), (11, 7)])
def test_running_extreme_1d(n, k):
    a = np.random.default_rng(n).normal(size=(3, n))
    r = (k - 1) // 2
    expected_max = np.array([[row[max(0, i - r):i + r + 1].max() for i in range(n)] for row in a])
    expected_min = np.array([[row[max(0, i - r):i + r + 1].min() for i in range(n)] for row in a])
    np.testing.assert_array_equal(running_extreme_1d(a, k, 1, "max"), expected_max)
    np.testing.assert_array_equal(running_extreme_1d(a, k, 1, "min"), expected_min)


@settings(max_examples=60, deadline=None)
@given(v=volumes, k=st.sampled_from([1, 3, 5]))
def test_separable_equals_bruteforce(v, k):
    if k > 2 * min(v.shape) - 1:
        return
    np.testing.assert_array_equal(dilate_flat(v, k), dilate_bruteforce(v, k))
    np.testing.assert_array_equal(erode_flat(v, k), erode_bruteforce(v, k))


@settings(max_examples=60, deadline=None)
@given(v=volumes, k=st.sampled_from([1, 3, 5]))
def test_duality_extensivity_and_ordering(v, k):
    if 5 > 2 * min(v.shape) - 1:
        return
    d, e = dilate_flat(v, k), erode_flat(v, k)
    np.testing.assert_array_equal(e, -dilate_flat(-v, k))
    assert np.all(d >= v) and np.all(v >= e)
    d5, e5 = dilate_flat(v, 5), erode_flat(v, 5)
    assert np.all(d <= d5) and np.all(e >= e5)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fada import attention as A

from oracles import gap_bruteforce, random_gap_instance


def test_gap_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        pts, lab = random_gap_instance(rng)
        assert abs(A.gap_statistic(pts, lab) - gap_bruteforce(pts, lab)) <= 1e-12 * max(1.0, gap_bruteforce(pts, lab))


def test_gap_hand_computed():
    # cluster {0, 3}: ordered pairs give 2 * 3 / (2 * 2); singleton contributes 0
    pts = np.array([[0.0], [3.0], [10.0]])
    assert A.gap_statistic(pts, np.array([0, 0, 1])) == pytest.approx(1.5)


def test_gap_requires_one_label_per_point():
    with pytest.raises(ValueError):
        A.gap_statistic(np.zeros((3, 2)), np.array([0, 1]))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (12, 2), elements=st.floats(-10, 10)), st.integers(1, 4), st.integers(0, 999))
def test_gap_invariant_to_label_renaming_and_nonnegative(pts, k, seed):
    lab = np.random.default_rng(seed).integers(0, k, 12)
    renamed = (lab + 7) * 3
    g = A.gap_statistic(pts, lab)
    assert g >= 0
    assert A.gap_statistic(pts, renamed) == pytest.approx(g, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_kmeans_wcss_never_increases(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 2))
    res = A.kmeans(pts, k, rng)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9)
    assert set(np.unique(res.assignment)) <= set(range(k))


def test_kmeans_separates_far_blobs():
    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))])
    res = A.kmeans(pts, 2, rng, restarts=3)
    assert len(set(res.assignment[:20])) == 1 and len(set(res.assignment[20:])) == 1
    assert res.assignment[0] != res.assignment[-1]


def test_kmeans_handles_duplicate_points():
    res = A.kmeans(np.zeros((5, 2)), 3, np.random.default_rng(0))
    assert res.wcss == 0.0


def test_kmeans_rejects_k_larger_than_n():
    with pytest.raises(ValueError):
        A.kmeans(np.zeros((2, 2)), 3, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)), st.floats(0, 1))
def test_floored_softmax_is_a_distribution_above_the_floor(gains, frac):
    n = gains.size
    floor = frac / n
    w = A.floor_and_renormalize(A.softmax(gains), floor)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= floor - 1e-12)


def test_floor_infeasible():
    with pytest.raises(ValueError):
        A.floor_and_renormalize(np.array([0.5, 0.5]), 0.6)


def test_first_round_mask_is_uniform_then_follows_gains():
    s = A.AttentionState(3)
    s = A.update_mask(s, [5.0, 5.0, 5.0])
    np.testing.assert_allclose(s.mask, 1 / 3)
    assert s.gains is None
    s = A.update_mask(s, [4.0, 5.0, 7.0])
    np.testing.assert_allclose(s.gains, [1.0, 0.0, -2.0])
    assert s.mask[0] > s.mask[1] > s.mask[2]
    assert s.mask.min() >= s.floor - 1e-12


def test_default_floor_is_a_tenth_of_uniform():
    assert A.AttentionState(4).floor == pytest.approx(1 / 40)


def test_update_mask_checks_length():
    with pytest.raises(ValueError):
        A.update_mask(A.AttentionState(3), [1.0, 2.0])


def test_target_gap_deterministic_for_fixed_seed():
    pts = np.random.default_rng(5).normal(size=(64, 3))
    a = A.target_gap(pts, 3, np.random.default_rng(9))
    b = A.target_gap(pts, 3, np.random.default_rng(9))
    assert a == b

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import filtered_members, greedy_maxmin, idw_scalar

from dapnet.geom import (
    UniformGrid,
    ball_query,
    canonical_seed,
    fps,
    idw_interpolate,
    idw_weights,
    knn,
)

# --- fps ---------------------------------------------------------------------


def test_fps_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, min(8, n) + 1))
        pts = rng.uniform(-5, 5, size=(n, 3))
        assert fps(pts, k).tolist() == greedy_maxmin(pts, k)


def test_fps_with_ties_on_a_lattice():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pts = rng.integers(0, 3, size=(20, 3)).astype(float)
        assert fps(pts, 6).tolist() == greedy_maxmin(pts, 6)


def test_fps_hand_cases():
    line = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
    assert fps(line, 2, seed=0).tolist() == [0, 2]
    pts = np.random.default_rng(2).normal(size=(9, 3))
    full = fps(pts, 9)
    assert sorted(full.tolist()) == list(range(9))
    assert np.array_equal(full, fps(pts, 9))
    with pytest.raises(ValueError):
        fps(pts, 10)


def test_fps_is_independent_of_input_order():
    rng = np.random.default_rng(3)
    for _ in range(30):
        pts = rng.normal(size=(40, 3))
        perm = rng.permutation(40)
        a = pts[fps(pts, 8)]
        b = pts[perm][fps(pts[perm], 8)]
        assert np.array_equal(a, b)


def test_canonical_seed_is_lexicographic_minimum():
    pts = np.array([[1.0, 0, 0], [0.0, 2, 0], [0.0, 1, 5], [0.0, 1, 5]])
    assert canonical_seed(pts) == 2


# --- ball query ----------------------------------------------------------------


def test_ball_query_matches_exhaustive_filter():
    rng = np.random.default_rng(4)
    for _ in range(50):
        pts = rng.uniform(0, 1, size=(128, 3))
        cents = fps(pts, 8)
        for radius in (0.05, 0.2, 0.5):
            g = ball_query(pts, cents, radius, 16)
            want = [filtered_members(pts, c, radius, 16) for c in cents]
            assert g.member_ids.tolist() == want


def test_ball_query_degenerate_radii():
    pts = np.random.default_rng(5).uniform(0, 1, size=(10, 3))
    tiny = ball_query(pts, [3, 7], 1e-9, 4)
    assert tiny.member_ids.tolist() == [[3] * 4, [7] * 4]
    assert tiny.padded.all()
    huge = ball_query(pts, [3, 7], 100.0, 4)
    assert huge.member_ids.tolist() == [[0, 1, 2, 3]] * 2
    assert not huge.padded.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0), st.integers(1, 12))
def test_ball_query_members_lie_within_radius(seed, radius, s):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, size=(30, 3))
    cents = rng.choice(30, size=4, replace=False)
    g = ball_query(pts, cents, radius, s)
    assert g.member_ids.shape == (4, s)
    dist = np.linalg.norm(pts[g.member_ids] - pts[cents][:, None, :], axis=-1)
    assert np.all(dist <= radius + 1e-9)


def test_uniform_grid_agrees_with_naive_search():
    rng = np.random.default_rng(6)
    pts = rng.uniform(0, 3, size=(200, 3))
    cents = fps(pts, 12)
    for radius, cell in ((0.3, 0.3), (0.5, 0.2), (1.0, 0.7)):
        a = ball_query(pts, cents, radius, 10)
        b = UniformGrid(pts, cell).ball_query(cents, radius, 10)
        assert np.array_equal(a.member_ids, b.member_ids)
        assert np.array_equal(a.padded, b.padded)


# --- knn / idw ------------------------------------------------------------------


def test_knn_orders_by_distance_then_index():
    src = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 3, 0]])
    idx, d2 = knn(src, np.zeros((1, 3)), 3)
    assert idx.tolist() == [[0, 1, 2]]
    assert d2.tolist() == [[1.0, 1.0, 9.0]]


def test_idw_matches_scalar_formula():
    rng = np.random.default_rng(7)
    for _ in range(100):
        src = rng.uniform(0, 1, size=(int(rng.integers(3, 20)), 3))
        feats = rng.normal(size=(len(src), 4))
        q = rng.uniform(0, 1, size=(5, 3))
        got = idw_interpolate(src, feats, q, 3)
        want = np.array([idw_scalar(src, feats, p) for p in q])
        assert np.max(np.abs(got - want)) <= 1e-12


def test_idw_exact_branch_and_symmetry():
    src = np.array([[0.0, 0, 0], [2.0, 0, 0], [5.0, 5, 5]])
    feats = np.array([[1.0, 2.0], [3.0, 6.0], [100.0, 100.0]])
    at_source = idw_interpolate(src, feats, src[1:2], 3)
    assert np.array_equal(at_source, feats[1:2])
    mid = idw_interpolate(src, feats, np.array([[1.0, 0, 0]]), 2)
    assert np.allclose(mid, [[2.0, 4.0]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_idw_weights_are_a_partition_of_unity(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 1, size=(12, 3))
    q = np.concatenate([rng.uniform(0, 1, size=(6, 3)), src[:2]])
    _, w = idw_weights(src, q, 3)
    assert np.all(w >= 0)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
    const = idw_interpolate(src, np.full((12, 2), 4.5), q, 3)
    assert np.allclose(const, 4.5, atol=1e-12)

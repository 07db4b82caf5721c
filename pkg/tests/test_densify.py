import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blursplat.densify import NEW_POINT_SCALE, DensifyConfig, densify_cloud, knn_query, nearest_indices

from helpers import random_cloud


def _scan_knn(points, q, k):
    # exhaustive scan with explicit (distance, index) ordering
    pairs = sorted((float(np.sqrt(((p - q) ** 2).sum())), i) for i, p in enumerate(points))
    return [i for _, i in pairs[:k]], [d for d, _ in pairs[:k]]


def test_knn_hand_example():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0]])
    idx, d = knn_query(pts, [0.9, 0, 0], 2)
    assert list(idx) == [1, 0]
    assert np.allclose(d, [0.1, 0.9])


def test_knn_query_on_a_point_returns_it_first(rng):
    pts = rng.normal(size=(30, 3))
    idx, d = knn_query(pts, pts[17], 3)
    assert idx[0] == 17 and d[0] == 0.0


@pytest.mark.parametrize("n", [200, 600])
def test_knn_matches_exhaustive_scan(rng, n):
    # 600 exercises the k-d tree path
    pts = rng.normal(size=(n, 3))
    for q in rng.normal(size=(10, 3)):
        idx, d = knn_query(pts, q, 4)
        ref_i, ref_d = _scan_knn(pts, q, 4)
        assert list(idx) == ref_i
        assert np.allclose(d, ref_d, rtol=0, atol=1e-15)


def test_knn_ties_break_by_index():
    pts = np.array([[1.0, 0, 0], [0, 1, 0], [-1, 0, 0], [0, 0, 3]])
    idx, _ = knn_query(pts, [0, 0, 0], 3)
    assert list(idx) == [0, 1, 2]
    big = np.concatenate([np.repeat(pts[:3], 100, axis=0), np.full((10, 3), 9.0)])
    i, _ = nearest_indices(big, np.zeros((1, 3)))
    assert i[0] == 0


def test_knn_rejects_bad_k(rng):
    with pytest.raises(ValueError):
        knn_query(rng.normal(size=(3, 3)), np.zeros(3), 4)
    with pytest.raises(ValueError):
        knn_query(np.zeros((0, 3)), np.zeros(3), 1)


def test_config_validation():
    for bad in (dict(n_new=-1), dict(k=0), dict(dist_threshold=0.0)):
        with pytest.raises(ValueError):
            DensifyConfig(**bad)


def test_zero_new_points_is_identity(rng):
    c = random_cloud(rng, 20)
    d = densify_cloud(c, DensifyConfig(n_new=0))
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
        assert np.array_equal(getattr(d, name), getattr(c, name))


def _check_invariants(sparse, dense, t_d):
    n = len(sparse)
    assert len(dense) >= n
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
        assert np.array_equal(getattr(dense, name)[:n], getattr(sparse, name))
    new = dense.positions[n:]
    d = np.linalg.norm(new[:, None] - sparse.positions[None], axis=2)
    parent = np.argmin(d, axis=1)
    assert np.all(d.min(axis=1) <= t_d)
    assert np.array_equal(dense.sh[n:], sparse.sh[parent])
    assert np.array_equal(dense.opacity_logits[n:], sparse.opacity_logits[parent])
    assert np.allclose(dense.log_scales[n:], sparse.log_scales[parent] + np.log(NEW_POINT_SCALE))


def test_default_neighbourhood_and_threshold_on_100_points(rng):
    sparse = random_cloud(rng, 100, spread=3.0, depth=(0, 6))
    cfg = DensifyConfig(n_new=8, k=4, dist_threshold=2.0, seed=3)
    dense = densify_cloud(sparse, cfg)
    assert len(dense) > 100
    _check_invariants(sparse, dense, 2.0)


def test_tight_threshold_rejects_far_candidates(rng):
    sparse = random_cloud(rng, 40, spread=5.0, depth=(0, 10))
    dense = densify_cloud(sparse, DensifyConfig(n_new=20, dist_threshold=0.3, seed=1))
    assert len(dense) < 40 + 40 * 20
    _check_invariants(sparse, dense, 0.3)


def test_single_point_candidates_coincide(rng):
    sparse = random_cloud(rng, 1)
    dense = densify_cloud(sparse, DensifyConfig(n_new=5))
    assert len(dense) == 6
    assert np.all(dense.positions == sparse.positions[0])


def test_candidates_stay_inside_neighbourhood_box(rng):
    sparse = random_cloud(rng, 10, spread=2.0)
    cfg = DensifyConfig(n_new=1, k=2, dist_threshold=100.0)
    dense = densify_cloud(sparse, cfg)
    # with one sample per point and a huge threshold, row 10 + i comes from point i
    for i in range(10):
        nb, _ = knn_query(sparse.positions, sparse.positions[i], 3)
        box = sparse.positions[nb]
        q = dense.positions[10 + i]
        assert np.all(q >= box.min(axis=0) - 1e-12) and np.all(q <= box.max(axis=0) + 1e-12)


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1), st.integers(1, 60), st.integers(0, 6))
def test_densify_properties(seed, n, n_new):
    rng = np.random.default_rng(seed)
    sparse = random_cloud(rng, n, spread=2.0)
    cfg = DensifyConfig(n_new=n_new, dist_threshold=float(rng.uniform(0.05, 2.0)), seed=seed)
    a = densify_cloud(sparse, cfg)
    b = densify_cloud(sparse, cfg)
    assert np.array_equal(a.positions, b.positions)
    _check_invariants(sparse, a, cfg.dist_threshold)

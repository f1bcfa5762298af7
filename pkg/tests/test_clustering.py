"""Tests for clustering features and the online CF tree"""

import numpy as np
import pytest

from spclab.core.clustering import (
    CFTree,
    ClusteringFeature,
    RunningStandardizer,
    agglomerate,
    assign,
    cf_insert,
    cf_merge,
    rebuild_global,
)
from spclab.utils.errors import ContractViolationError, NoCentersError


def _two_blobs(rng, n=100, spread=0.3):
    a = rng.normal([0.0, 0.0], spread, size=(n, 2))
    b = rng.normal([10.0, 0.0], spread, size=(n, 2))
    return a, b


def test_cf_merge_identity_and_pairs():
    """Test merging with an empty CF and pairwise additivity"""
    p1, p2 = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    cf = ClusteringFeature.from_point(p1)
    same = cf_merge(cf, ClusteringFeature.empty(2))
    assert same.count == 1
    assert np.array_equal(same.linear_sum, cf.linear_sum)
    assert same.squared_sum == cf.squared_sum

    pair = cf_merge(ClusteringFeature.from_point(p1), ClusteringFeature.from_point(p2))
    batch = ClusteringFeature.from_points(np.stack([p1, p2]))
    assert pair.count == batch.count == 2
    assert np.array_equal(pair.linear_sum, batch.linear_sum)
    assert pair.squared_sum == batch.squared_sum


def test_cf_merge_split_groups_exact():
    """Test merged group CFs equal the batch CF of all 50 points"""
    rng = np.random.default_rng(5)
    points = rng.integers(-100, 100, size=(50, 2)).astype(np.float64)
    mask = rng.random(50) < 0.5
    merged = cf_merge(ClusteringFeature.from_points(points[mask]),
                      ClusteringFeature.from_points(points[~mask]))
    batch = ClusteringFeature.from_points(points)
    assert merged.count == 50
    assert np.array_equal(merged.linear_sum, batch.linear_sum)
    assert merged.squared_sum == batch.squared_sum


def test_cf_merge_dimension_mismatch():
    """Test merging CFs of different dimension fails"""
    with pytest.raises(ContractViolationError):
        cf_merge(ClusteringFeature.empty(2), ClusteringFeature.empty(3))


def test_centroid_and_radius():
    """Test centroid equals the mean and radius is the RMS distance"""
    rng = np.random.default_rng(1)
    points = rng.normal(size=(40, 3))
    cf = ClusteringFeature.from_points(points)
    assert np.allclose(cf.centroid, points.mean(axis=0), rtol=1e-9, atol=1e-12)
    rms = np.sqrt(np.mean(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))
    assert cf.radius == pytest.approx(rms, rel=1e-9)
    assert ClusteringFeature.empty(3).radius == 0.0


def test_cf_insert_first_and_second_point():
    """Test the singleton cluster and the midpoint after a close second point"""
    tree = CFTree(dim=2, merge_threshold=1.0)
    first = cf_insert(tree, np.array([0.0, 0.0]))
    assert first.cluster_id == 0
    assert np.array_equal(first.center, [0.0, 0.0])

    second = cf_insert(tree, np.array([0.5, 0.0]))
    assert second.cluster_id == 0
    assert np.allclose(second.center, [0.25, 0.0])


def test_full_tree_keeps_leaves_within_threshold():
    """Test capacity merges raise the threshold so no leaf exceeds it"""
    tree = CFTree(dim=2, branching_factor=2, merge_threshold=0.01, max_clusters=2)
    rng = np.random.default_rng(3)
    for x in rng.uniform(-5.0, 5.0, size=(60, 2)):
        cf_insert(tree, x)
        assert len(tree.leaves) <= tree.leaf_capacity
        assert all(leaf.radius <= tree.merge_threshold + 1e-12 for leaf in tree.leaves)
    assert tree.merge_threshold > 0.01
    assert sum(leaf.count for leaf in tree.leaves) == 60
    assert len(tree.leaves) == 1


def test_cf_insert_rejects_bad_contexts():
    """Test wrong dimension and non-finite contexts are contract violations"""
    tree = CFTree(dim=2)
    with pytest.raises(ContractViolationError):
        cf_insert(tree, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ContractViolationError):
        cf_insert(tree, np.array([1.0, np.nan]))


def test_two_blob_recovery():
    """Test two separated blobs yield two centers near the blob means"""
    for seed in range(3):
        rng = np.random.default_rng(seed)
        a, b = _two_blobs(rng)
        data = np.concatenate([a, b])
        tree = CFTree(dim=2, merge_threshold=1.0, max_clusters=2)
        for i in rng.permutation(len(data)):
            cf_insert(tree, data[i])
        rebuild_global(tree)
        _, centers = tree.published()
        assert centers.shape == (2, 2)
        for mean in (a.mean(axis=0), b.mean(axis=0)):
            assert np.min(np.linalg.norm(centers - mean, axis=1)) <= 0.3


def test_leaf_radius_and_center_cap():
    """Test leaves respect the threshold and published centers stay within N_c"""
    rng = np.random.default_rng(7)
    tree = CFTree(dim=2, branching_factor=20, merge_threshold=0.5, max_clusters=3)
    for x in rng.uniform(0.0, 3.0, size=(200, 2)):
        result = cf_insert(tree, x)
        assert 0 <= result.cluster_id < 3
        assert len(tree.centers) <= 3
    assert all(leaf.radius <= 0.5 + 1e-12 for leaf in tree.leaves)
    assert sum(leaf.count for leaf in tree.leaves) == 200


def test_cluster_ids_survive_small_moves():
    """Test a blob keeps its cluster id as more of its points arrive"""
    rng = np.random.default_rng(3)
    a, b = _two_blobs(rng)
    tree = CFTree(dim=2, merge_threshold=1.0, max_clusters=2)
    for x in np.concatenate([a[:50], b[:50]]):
        cf_insert(tree, x)
    id_a = assign(tree, a[0]).cluster_id
    id_b = assign(tree, b[0]).cluster_id
    assert id_a != id_b
    for x in np.concatenate([a[50:], b[50:]]):
        cf_insert(tree, x)
    assert assign(tree, a[0]).cluster_id == id_a
    assert assign(tree, b[0]).cluster_id == id_b


def test_assign_examples():
    """Test exact hits, the lower-id tie rule and the empty tree"""
    tree = CFTree(dim=2, centers={0: np.array([0.0, 0.0]), 1: np.array([2.0, 0.0])})
    assert assign(tree, np.array([2.0, 0.0])).cluster_id == 1
    assert assign(tree, np.array([1.0, 0.0])).cluster_id == 0

    with pytest.raises(NoCentersError):
        assign(CFTree(dim=2), np.zeros(2))


def test_assign_matches_linear_scan_and_is_pure():
    """Test assign agrees with a brute-force scan and leaves the tree untouched"""
    rng = np.random.default_rng(11)
    tree = CFTree(dim=3, centers={k: rng.normal(size=3) for k in range(4)})
    before = tree.to_dict()
    for _ in range(1000):
        x = rng.normal(size=3) * 2
        best, best_d = None, np.inf
        for k in sorted(tree.centers):
            d = np.linalg.norm(tree.centers[k] - x)
            if d < best_d:
                best, best_d = k, d
        assert assign(tree, x).cluster_id == best
    assert tree.to_dict() == before


def test_rebuild_global_examples():
    """Test no merging below N_c and the hand-checkable three-leaf merge"""
    leaves = [ClusteringFeature.from_point(np.array([v])) for v in (0.0, 0.2, 5.0)]
    tree = CFTree(dim=1, max_clusters=3, leaves=list(leaves))
    centers = rebuild_global(tree)
    assert sorted(float(c[0]) for c in centers.values()) == [0.0, 0.2, 5.0]

    tree = CFTree(dim=1, max_clusters=2, leaves=list(leaves))
    centers = rebuild_global(tree)
    assert centers[0][0] == pytest.approx(0.1)
    assert centers[1][0] == pytest.approx(5.0)


def test_agglomerate_matches_exhaustive_oracle():
    """Test the merge order on 10 random leaves against pairwise search"""
    rng = np.random.default_rng(21)
    leaves = [ClusteringFeature.from_points(rng.normal(loc, 0.1, size=(3, 2)))
              for loc in rng.uniform(-5, 5, size=(10, 2))]

    oracle = list(leaves)
    while len(oracle) > 3:
        best = None
        for i in range(len(oracle)):
            for j in range(i + 1, len(oracle)):
                d = np.linalg.norm(oracle[i].centroid - oracle[j].centroid)
                if best is None or d < best[0]:
                    best = (d, i, j)
        _, i, j = best
        oracle[i] = cf_merge(oracle[i], oracle[j])
        del oracle[j]

    result = agglomerate(leaves, 3)
    assert len(result) == 3
    for got, want in zip(result, oracle):
        assert got.count == want.count
        assert np.allclose(got.centroid, want.centroid)


def test_running_standardizer():
    """Test Welford statistics and the unit scale for constant coordinates"""
    rng = np.random.default_rng(2)
    data = np.column_stack([rng.normal(3.0, 2.0, 500), np.full(500, 7.0)])
    std = RunningStandardizer(2)
    for x in data:
        std.update(x)
    assert np.allclose(std.mean, data.mean(axis=0))
    assert std.std[0] == pytest.approx(data[:, 0].std())
    assert std.std[1] == 1.0
    z = std.transform(data[0])
    assert z[1] == pytest.approx(0.0)


def test_tree_serialisation():
    """Test to_dict / from_dict round trip of leaves and centers"""
    rng = np.random.default_rng(8)
    tree = CFTree(dim=2, merge_threshold=0.4)
    for x in rng.normal(size=(30, 2)):
        cf_insert(tree, x)
    restored = CFTree.from_dict(tree.to_dict())
    assert restored.to_dict() == tree.to_dict()
    x = np.array([0.3, -0.2])
    assert assign(restored, x).cluster_id == assign(tree, x).cluster_id

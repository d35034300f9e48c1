import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diversify.errors import DataError
from diversify.pseudolabel import (
    assignment_cost,
    distances,
    domain_class_label,
    hard_centroids,
    nearest_centroid_assign,
    refine_pseudo_labels,
    refresh_pseudo_labels,
    soft_centroids,
    split_domain_class,
)


@pytest.mark.parametrize("d,y,C,s", [(2, 3, 6, 15), (0, 4, 6, 4), (2, 5, 6, 17), (0, 0, 1, 0)])
def test_domain_class_label(d, y, C, s):
    assert domain_class_label(d, y, C) == s
    assert split_domain_class(s, C) == (d, y)


@pytest.mark.parametrize("d,y,K", [(0, 6, 3), (3, 0, 3), (-1, 0, 3)])
def test_domain_class_label_range(d, y, K):
    with pytest.raises(DataError):
        domain_class_label(d, y, 6, K)


def test_domain_class_label_vectorised():
    d, y = np.array([0, 1, 2]), np.array([1, 1, 0])
    s = domain_class_label(d, y, 4)
    assert s.tolist() == [1, 5, 8]
    dd, yy = split_domain_class(s, 4)
    assert dd.tolist() == d.tolist() and yy.tolist() == y.tolist()


def test_soft_centroid_examples():
    F = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert np.array_equal(soft_centroids(F, [[1.0], [0.0]]), [[0.0, 2.0]])
    assert np.array_equal(soft_centroids(F, [[0.5], [0.5]]), [[1.0, 1.0]])


def test_soft_centroid_degenerate_mass():
    F = np.array([[0.0, 2.0], [2.0, 0.0], [5.0, 5.0]])
    W = np.array([[1.0, 0.0], [1.0, 1e-14], [1.0, 0.0]])
    out = soft_centroids(F, W)
    assert np.array_equal(out[1], F[1])


def test_nearest_centroid_examples():
    assert nearest_centroid_assign([[1.0, 1.0]], [[0.0, 0.0], [10.0, 10.0]], "euclidean").tolist() == [0]
    # cosine tie goes to the smaller index
    assert nearest_centroid_assign([[2.0, 2.0]], [[1.0, 0.0], [0.0, 1.0]], "cosine").tolist() == [0]


def test_cosine_zero_feature_falls_back_to_euclidean():
    d = distances(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0], [1.0, 0.0]]), "cosine")
    assert d.tolist() == [[5.0, 1.0]]


def test_refine_example():
    F = np.array([[0.0, 0.0], [2.0, 2.0], [10.0, 10.0]])
    res = refine_pseudo_labels(F, [0, 0, 1], 2, "euclidean")
    assert np.array_equal(res.centroids, [[1.0, 1.0], [10.0, 10.0]])
    assert res.labels.tolist() == [0, 0, 1]
    assert res.n_changed == 0


def test_empty_cluster_reseeded_at_farthest_point():
    F = np.array([[0.0, 0.0], [1.0, 0.0], [9.0, 0.0]])
    cents, reseeded = hard_centroids(F, [0, 0, 0], 2, "euclidean")
    assert reseeded == [1]
    assert np.array_equal(cents[1], [9.0, 0.0])


def test_labels_out_of_range():
    with pytest.raises(DataError):
        hard_centroids(np.zeros((2, 2)), [0, 2], 2)


def brute_distance(f, c, metric):
    if metric == "euclidean":
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(f, c)))
    nf = math.sqrt(sum(a * a for a in f))
    nc = math.sqrt(sum(b * b for b in c))
    if nf == 0:
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(f, c)))
    if nc == 0:
        return 1.0
    return 1.0 - sum(a * b for a, b in zip(f, c)) / (nf * nc)


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_assignment_matches_brute_force(metric):
    rng = np.random.default_rng(11)
    F, C = rng.normal(size=(100, 5)), rng.normal(size=(4, 5))
    expected = []
    for f in F:
        ds = [brute_distance(f, c, metric) for c in C]
        expected.append(min(range(4), key=lambda k: (ds[k], k)))
    assert nearest_centroid_assign(F, C, metric).tolist() == expected


def test_soft_centroids_match_brute_force():
    rng = np.random.default_rng(5)
    F = rng.normal(size=(50, 3))
    W = rng.dirichlet(np.ones(4), size=50)
    out = soft_centroids(F, W)
    for k in range(4):
        num = [0.0, 0.0, 0.0]
        den = 0.0
        for i in range(50):
            den += W[i, k]
            for j in range(3):
                num[j] += W[i, k] * F[i, j]
        assert np.allclose(out[k], [v / den for v in num], atol=1e-10, rtol=0)


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(2, 60),
    k=st.integers(1, 5),
    dim=st.integers(1, 6),
    metric=st.sampled_from(["euclidean", "cosine"]),
    seed=st.integers(0, 2**32 - 1),
)
def test_lloyd_pass_never_increases_cost(n, k, dim, metric, seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(n, dim))
    if metric == "cosine":
        F /= np.linalg.norm(F, axis=1, keepdims=True)
    labels = rng.integers(0, k, size=n)
    # re-seeded centroids hold no members yet, so they do not enter ``before``
    cents, _ = hard_centroids(F, labels, k, metric)
    before = assignment_cost(F, cents, labels, metric)
    res = refine_pseudo_labels(F, labels, k, metric)
    assert assignment_cost(F, res.centroids, res.labels, metric) <= before + 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 3), elements=st.floats(-5, 5)), st.integers(1, 4))
def test_refresh_labels_in_range(F, k):
    W = np.full((20, k), 1.0 / k)
    _, provisional, refined, res = refresh_pseudo_labels(F, W, "cosine")
    assert provisional.min() >= 0 and provisional.max() < k
    assert refined.min() >= 0 and refined.max() < k
    assert np.all(np.isfinite(res.centroids))


def test_converged_assignment_is_fixed_point():
    F = np.array([[0.0, 0.1], [0.1, 0.0], [5.0, 5.0], [5.1, 4.9]])
    first = refine_pseudo_labels(F, [0, 0, 1, 1], 2, "euclidean")
    again = refine_pseudo_labels(F, first.labels, 2, "euclidean")
    assert again.n_changed == 0 and np.array_equal(again.labels, first.labels)

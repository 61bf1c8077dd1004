from itertools import combinations

import numpy as np
import pytest
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist, squareform

from trajcluster.core import Partition, TrajclusterError, adjusted_rand_index
from trajcluster.distance import (
    ahc,
    average_silhouette_width,
    check_distance_matrix,
    cut_dendrogram,
    k_medoids,
    pairwise_distances,
    silhouette_values,
)


def _random_dist(rng, n, dim=3):
    return squareform(pdist(rng.normal(size=(n, dim))))


def _upgma_oracle(D):
    """Average linkage recomputed from the raw distances at every step."""
    N = D.shape[0]
    clusters = {i: [i] for i in range(N)}   # slot -> members; slot = smallest member
    node = {i: i for i in range(N)}
    merges = []
    for step in range(N - 1):
        best = None
        for a, b in combinations(sorted(clusters), 2):
            h = np.mean([D[i, j] for i in clusters[a] for j in clusters[b]])
            if best is None or h < best[0]:
                best = (h, a, b)
        h, a, b = best
        merges.append((min(node[a], node[b]), max(node[a], node[b]), h, len(clusters[a]) + len(clusters[b])))
        clusters[a] = clusters[a] + clusters.pop(b)
        node[a] = N + step
        del node[b]
    return merges


def test_pairwise_distances_exact(rng):
    X = rng.normal(size=(7, 4))
    D = pairwise_distances(X)
    np.testing.assert_allclose(D, squareform(pdist(X)), atol=1e-14)
    assert np.array_equal(D, D.T) and np.all(np.diag(D) == 0)


def test_check_distance_matrix_rejects_bad_input():
    with pytest.raises(TrajclusterError):
        check_distance_matrix([[0, 1], [2, 0]])
    with pytest.raises(TrajclusterError):
        check_distance_matrix([[1, 1], [1, 0]])
    with pytest.raises(TrajclusterError):
        check_distance_matrix([[0, -1], [-1, 0]])


def test_upgma_matches_naive_recomputation(rng):
    for _ in range(100):
        n = int(rng.integers(2, 9))
        D = _random_dist(rng, n)
        got = ahc(D, "average").merges
        want = _upgma_oracle(D)
        for g, w in zip(got, want):
            assert (int(g[0]), int(g[1]), int(g[3])) == (w[0], w[1], w[3])
            assert g[2] == pytest.approx(w[2], rel=1e-12, abs=1e-14)


def test_upgma_tie_break_lowest_pair():
    D = np.array([[0, 1, 4, 4], [1, 0, 4, 4], [4, 4, 0, 1], [4, 4, 1, 0]], dtype=float)
    m = ahc(D, "average").merges
    assert m[0, :2].tolist() == [0, 1]
    assert m[1, :2].tolist() == [2, 3]


@pytest.mark.parametrize("method", ["single", "complete", "average", "ward", "centroid"])
def test_heights_and_partitions_match_scipy(rng, method):
    for _ in range(10):
        X = rng.normal(size=(int(rng.integers(5, 30)), 2))
        D = squareform(pdist(X))
        ours = ahc(D, method)
        ref = linkage(pdist(X), method=method)
        np.testing.assert_allclose(np.sort(ours.heights), np.sort(ref[:, 2]), rtol=1e-10, atol=1e-12)
        if method != "centroid":
            for G in (2, 3, 4):
                p = cut_dendrogram(ours, G)
                q = fcluster(ref, G, criterion="maxclust")
                assert adjusted_rand_index(p, q) == pytest.approx(1.0)


def test_monotone_linkages_have_nondecreasing_heights(rng):
    D = _random_dist(rng, 25)
    for method in ("single", "complete", "average", "ward"):
        h = ahc(D, method).heights
        assert np.all(np.diff(h) >= -1e-12)


def test_cut_dendrogram_sizes_and_labels(rng):
    D = _random_dist(rng, 12)
    dend = ahc(D)
    assert cut_dendrogram(dend, 1).labels.tolist() == [1] * 12
    assert sorted(cut_dendrogram(dend, 12).labels.tolist()) == list(range(1, 13))
    p = cut_dendrogram(dend, 4)
    assert p.G == 4 and np.all(p.sizes() > 0)
    assert p.labels[0] == 1
    with pytest.raises(TrajclusterError):
        cut_dendrogram(dend, 13)


def test_dendrogram_csv(tmp_path, rng):
    dend = ahc(_random_dist(rng, 4))
    path = tmp_path / "d.csv"
    dend.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "left,right,height,size" and len(lines) == 4


def _pam_oracle(D, G):
    return min(D[:, list(c)].min(axis=1).sum() for c in combinations(range(D.shape[0]), G))


def test_kmedoids_matches_exhaustive(rng):
    for _ in range(60):
        n = int(rng.integers(3, 11))
        G = int(rng.integers(1, 4))
        D = _random_dist(rng, n, dim=2)
        part, med, cost = k_medoids(D, G, n_starts=5, seed=1)
        assert cost == pytest.approx(_pam_oracle(D, G), rel=1e-12)
        assert part.labels.tolist() == (np.argmin(D[:, med], axis=1) + 1).tolist()


def test_kmedoids_trace_nonincreasing_and_deterministic(rng):
    D = _random_dist(rng, 40)
    a = k_medoids(D, 4, n_starts=3, seed=2, return_trace=True)
    b = k_medoids(D, 4, n_starts=3, seed=2, return_trace=True)
    assert np.all(np.diff(a[3]) <= 1e-12)
    assert a[0].labels.tolist() == b[0].labels.tolist() and a[2] == b[2]
    assert a[2] == pytest.approx(a[3][-1])


def _silhouette_oracle(D, labels):
    n = len(labels)
    s = np.zeros(n)
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            continue
        a = np.mean([D[i, j] for j in own])
        b = min(np.mean([D[i, j] for j in range(n) if labels[j] == g])
                for g in set(labels) if g != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return s


def test_silhouette_matches_definition(rng):
    for _ in range(30):
        n = int(rng.integers(3, 20))
        G = int(rng.integers(2, min(n, 5) + 1))
        labels = np.concatenate([np.arange(1, G + 1), rng.integers(1, G + 1, n - G)])
        rng.shuffle(labels)
        D = _random_dist(rng, n)
        got = silhouette_values(D, Partition(labels, G))
        np.testing.assert_allclose(got, _silhouette_oracle(D, labels.tolist()), atol=1e-12)
        assert -1 <= average_silhouette_width(D, Partition(labels, G)) <= 1


def test_silhouette_errors_and_singletons():
    D = squareform(pdist(np.array([[0.0], [1.0], [10.0]])))
    assert silhouette_values(D, Partition([1, 1, 2], 2))[2] == 0.0
    with pytest.raises(TrajclusterError):
        silhouette_values(D, Partition([1, 1, 1], 1))
    with pytest.raises(TrajclusterError):
        silhouette_values(D, Partition([1, 1, 1], 2))

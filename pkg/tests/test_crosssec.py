import math

import numpy as np
import pytest

from trajcluster.core import AlignedMatrix, TrajclusterError, adjusted_rand_index, align
from trajcluster.crosssec import (
    SD_FLOOR,
    kml_assign,
    kml_bic,
    kml_fit,
    kml_loglik,
    kmeanspp_init,
    llpa_fit,
    llpa_posterior,
)


def _separated(rng, sizes=(30, 20, 25), n=6, spread=0.3):
    centers = np.array([[8.0] * n, [4.0] * n, np.linspace(0, 3, n)])[: len(sizes)]
    Y = np.vstack([c + spread * rng.normal(size=(k, n)) for c, k in zip(centers, sizes)])
    truth = np.repeat(np.arange(1, len(sizes) + 1), sizes)
    ids = tuple(f"s{i:03d}" for i in range(Y.shape[0]))
    return AlignedMatrix(ids, np.arange(n, dtype=float), Y), truth


def test_kml_recovers_separated_clusters(rng):
    A, truth = _separated(rng)
    res = kml_fit(A, 3, n_starts=5, seed=1)
    assert adjusted_rand_index(res.partition, truth) == 1.0
    # canonical order: descending mean level
    assert np.all(np.diff(res.centroids.mean(axis=1)) < 0)
    assert np.all(np.diff(res.wss_trace) <= 1e-9)


def test_kml_bic_formula(rng):
    A, _ = _separated(rng)
    res = kml_fit(A, 2, n_starts=3, seed=0)
    N, n = A.shape
    s2 = res.wss / (N * n)
    ll = -0.5 * N * n * (math.log(2 * math.pi) + math.log(s2)) - 0.5 * N * n
    assert kml_loglik(res, A) == pytest.approx(ll, rel=1e-12)
    assert res.bic_approx == pytest.approx((2 * n + 1) * math.log(N * n) - 2 * ll, rel=1e-12)
    assert kml_bic(res, A, n_obs=N) == pytest.approx((2 * n + 1) * math.log(N) - 2 * ll, rel=1e-12)


def test_kml_deterministic_and_order_invariant(rng):
    A, _ = _separated(rng, spread=1.5)
    a = kml_fit(A, 3, n_starts=4, seed=7)
    b = kml_fit(A, 3, n_starts=4, seed=7)
    assert a.partition.labels.tolist() == b.partition.labels.tolist()
    perm = rng.permutation(A.shape[0])
    P = AlignedMatrix(tuple(A.subject_ids[i] for i in perm), A.grid, A.matrix[perm])
    c = kml_fit(P, 3, n_starts=4, seed=7)
    assert c.partition.labels.tolist() == a.partition.labels[perm].tolist()


def test_kml_init_centroids_and_errors(rng):
    A, _ = _separated(rng)
    res = kml_fit(A, 2, init_centroids=A.matrix[[0, 40]])
    assert res.starts_used == 1
    with pytest.raises(TrajclusterError):
        kml_fit(A, 2, init_centroids=A.matrix[:3])
    with pytest.raises(TrajclusterError):
        kml_fit(A, 1000)


def test_kmeanspp_picks_distinct_points(rng):
    Y = np.repeat(np.eye(3), 4, axis=0)
    C = kmeanspp_init(Y, 3, np.random.default_rng(0))
    assert len({tuple(c) for c in C}) == 3


def test_kml_no_empty_clusters_with_duplicates():
    Y = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    A = AlignedMatrix(tuple(str(i) for i in range(6)), [0.0, 1.0], Y)
    res = kml_fit(A, 3, n_starts=2, seed=0)
    assert np.all(res.partition.sizes() > 0)


@pytest.mark.parametrize("mode", ["per-time", "tied"])
def test_llpa_monotone_and_valid(rng, mode):
    A, truth = _separated(rng, spread=0.8)
    model, z = llpa_fit(A, 3, n_starts=3, seed=2, variance_mode=mode)
    tr = np.array(model.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[1:]))
    np.testing.assert_allclose(z.probs.sum(axis=1), 1, atol=1e-9)
    assert np.all(model.sds >= SD_FLOOR)
    assert model.n_params == 2 + 3 * 6 + (3 * 6 if mode == "per-time" else 3)
    assert adjusted_rand_index(np.argmax(z.probs, axis=1), truth) == 1.0


def test_llpa_floor_on_constant_columns(rng):
    Y = np.vstack([np.zeros((10, 4)), np.full((10, 4), 5.0)])
    Y[:, 1] += rng.normal(size=20)
    A = AlignedMatrix(tuple(str(i) for i in range(20)), np.arange(4.0), Y)
    model, _ = llpa_fit(A, 2, n_starts=2, seed=0)
    assert np.isfinite(model.loglik)
    assert model.sds.min() == SD_FLOOR


def test_llpa_partial_posterior_matches_full(rng):
    A, _ = _separated(rng, spread=1.0)
    model, z = llpa_fit(A, 3, n_starts=2, seed=3)
    np.testing.assert_allclose(llpa_posterior(model, A.matrix), z.probs, atol=1e-9)
    Y = A.matrix.copy()
    Y[:, 3:] = np.nan
    part = llpa_posterior(model, Y)
    np.testing.assert_allclose(part.sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(llpa_posterior(model, np.full((1, 6), np.nan))[0], model.proportions)


def test_kml_assign_partial(rng):
    A, _ = _separated(rng)
    res = kml_fit(A, 3, n_starts=2, seed=0)
    assert kml_assign(res.centroids, A.matrix).tolist() == res.partition.labels.tolist()
    Y = A.matrix.copy()
    Y[:, ::2] = np.nan
    assert adjusted_rand_index(kml_assign(res.centroids, Y), res.partition) == 1.0


def test_llpa_bad_mode(small_synth):
    with pytest.raises(TrajclusterError):
        llpa_fit(align(small_synth[0]), 2, variance_mode="free")

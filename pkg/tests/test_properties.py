import io
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajcluster.core import (
    Dataset,
    Partition,
    Trajectory,
    adjusted_rand_index,
    load_trajectories,
    write_trajectories,
)
from trajcluster.distance import ahc, average_silhouette_width, cut_dendrogram, pairwise_distances
from trajcluster.selection import bic, posterior_entropy

labels = st.lists(st.integers(1, 4), min_size=2, max_size=30)
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(labels, st.data())
def test_ari_symmetric_and_relabel_invariant(a, data):
    b = data.draw(st.lists(st.integers(1, 4), min_size=len(a), max_size=len(a)))
    perm = data.draw(st.permutations([1, 2, 3, 4]))
    relabelled = [perm[x - 1] for x in a]
    assert math.isclose(adjusted_rand_index(a, b), adjusted_rand_index(b, a), abs_tol=1e-12)
    assert adjusted_rand_index(a, relabelled) == 1.0
    assert adjusted_rand_index(a, b) <= 1.0 + 1e-12


@given(finite, st.integers(0, 50), st.integers(1, 10**6))
def test_bic_strictly_increasing_in_params(ll, p, n):
    if n > 1:
        assert bic(ll, p + 1, n) > bic(ll, p, n)


@given(arrays(float, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=st.floats(0, 1)))
def test_entropy_bounds(raw):
    z = raw + 1e-3
    z = z / z.sum(axis=1, keepdims=True)
    h = posterior_entropy(z)
    assert -1e-12 <= h <= math.log(z.shape[1]) + 1e-9


@settings(max_examples=50)
@given(arrays(float, st.tuples(st.integers(4, 15), st.integers(1, 3)), elements=st.floats(-100, 100)),
       st.integers(2, 4))
def test_cut_and_silhouette_properties(X, G):
    D = pairwise_distances(X)
    dend = ahc(D, "average")
    p = cut_dendrogram(dend, G)
    assert p.G == G and np.all(p.sizes() > 0)
    assert -1 - 1e-12 <= average_silhouette_width(D, p) <= 1 + 1e-12


ids = st.text("abcxyz0123", min_size=1, max_size=5)


@settings(max_examples=50)
@given(st.dictionaries(ids, st.lists(st.tuples(st.floats(-1e3, 1e3), finite), min_size=1, max_size=6,
                                     unique_by=lambda x: x[0]), min_size=1, max_size=5))
def test_csv_round_trip(subjects):
    ds = Dataset(tuple(Trajectory(sid, *zip(*sorted(obs))) for sid, obs in subjects.items()))
    buf = io.StringIO()
    write_trajectories(ds, buf)
    back = load_trajectories(io.StringIO(buf.getvalue()))
    assert back.subject_ids == ds.subject_ids
    for a, b in zip(ds, back):
        assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=40))
def test_partition_sizes_sum(lab):
    p = Partition(lab, 5)
    assert p.sizes().sum() == len(lab)

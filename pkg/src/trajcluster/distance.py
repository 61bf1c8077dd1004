"""Distance-based clustering: pairwise distances, hierarchical clustering,
k-medoids and the average silhouette width.

Distance matrices are plain ``(N, N)`` float arrays: symmetric, zero
diagonal, non-negative (see :func:`check_distance_matrix`).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import AlignedMatrix, Partition, TrajclusterError

__all__ = [
    "LINKAGES",
    "Dendrogram",
    "pairwise_distances",
    "check_distance_matrix",
    "ahc",
    "cut_dendrogram",
    "k_medoids",
    "silhouette_values",
    "average_silhouette_width",
]

LINKAGES = ("average", "single", "complete", "ward", "centroid")
MONOTONE_LINKAGES = ("average", "single", "complete", "ward")


def pairwise_distances(data: Union[AlignedMatrix, np.ndarray], metric: str = "euclidean") -> np.ndarray:
    """Euclidean distances between the rows of ``data``."""
    if metric != "euclidean":
        raise TrajclusterError(f"unsupported metric {metric!r}")
    Y = np.asarray(data.matrix if isinstance(data, AlignedMatrix) else data, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise TrajclusterError("need a 2-D array with at least 2 rows")
    if not np.all(np.isfinite(Y)):
        raise TrajclusterError("data contain non-finite values")
    N = Y.shape[0]
    D = np.zeros((N, N))
    for i in range(N - 1):
        diff = Y[i + 1:] - Y[i]
        D[i, i + 1:] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return D + D.T


def check_distance_matrix(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise TrajclusterError("distance matrix must be square")
    if not np.all(np.isfinite(D)):
        raise TrajclusterError("distance matrix contains non-finite entries")
    if np.any(np.diag(D) != 0):
        raise TrajclusterError("distance matrix must have a zero diagonal")
    if np.any(D < 0):
        raise TrajclusterError("distances must be non-negative")
    if not np.array_equal(D, D.T):
        raise TrajclusterError("distance matrix must be symmetric")
    return D


# ------------------------------------------------------------------------- AHC


@dataclass(frozen=True)
class Dendrogram:
    """Merge history of an agglomerative clustering.

    ``merges[k] = (left, right, height, size)``. Leaves are nodes
    ``0..N-1`` and merge ``k`` creates node ``N + k`` (hclust-like layout
    with 0-based indices); ``left < right``.
    """

    merges: np.ndarray
    n_leaves: int
    linkage: str

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def to_csv(self, dest) -> None:
        close = isinstance(dest, (str, os.PathLike))
        fh = open(dest, "w", encoding="utf-8", newline="") if close else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("left", "right", "height", "size"))
            for left, right, h, size in self.merges.tolist():
                w.writerow((int(left), int(right), repr(float(h)), int(size)))
        finally:
            if close:
                fh.close()


def _lance_williams(linkage, dki, dkj, dij, ni, nj, nk):
    if linkage == "single":
        return np.minimum(dki, dkj)
    if linkage == "complete":
        return np.maximum(dki, dkj)
    if linkage == "average":
        return (ni * dki + nj * dkj) / (ni + nj)
    if linkage == "ward":
        sq = ((ni + nk) * dki**2 + (nj + nk) * dkj**2 - nk * dij**2) / (ni + nj + nk)
        return np.sqrt(np.maximum(sq, 0.0))
    # centroid
    sq = (ni * dki**2 + nj * dkj**2) / (ni + nj) - ni * nj * dij**2 / (ni + nj) ** 2
    return np.sqrt(np.maximum(sq, 0.0))


def ahc(dist, linkage: str = "average") -> Dendrogram:
    """Agglomerative hierarchical clustering with Lance-Williams updates.

    At every step the pair of clusters at minimal linkage distance is
    merged; ties go to the lowest ``(i, j)`` pair, where a cluster is
    indexed by its smallest member. Ward and centroid linkage interpret
    ``dist`` as Euclidean distances. Centroid linkage can produce
    decreasing merge heights.
    """
    if linkage not in LINKAGES:
        raise TrajclusterError(f"unknown linkage {linkage!r}; choose from {', '.join(LINKAGES)}")
    D = check_distance_matrix(dist).copy()
    N = D.shape[0]
    if N < 2:
        raise TrajclusterError("need at least 2 objects")
    D[np.diag_indices(N)] = np.inf
    upper = np.triu(np.ones((N, N), dtype=bool), k=1)
    active = np.ones(N, dtype=bool)
    size = np.ones(N)
    node = np.arange(N)
    merges = np.empty((N - 1, 4))
    for step in range(N - 1):
        flat = int(np.argmin(np.where(upper, D, np.inf)))
        i, j = divmod(flat, N)
        h = D[i, j]
        merges[step] = (min(node[i], node[j]), max(node[i], node[j]), h, size[i] + size[j])
        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        new = _lance_williams(linkage, D[others, i], D[others, j], h, size[i], size[j], size[others])
        D[others, i] = new
        D[i, others] = new
        D[j, :] = np.inf
        D[:, j] = np.inf
        active[j] = False
        size[i] += size[j]
        node[i] = N + step
    return Dendrogram(merges, N, linkage)


def cut_dendrogram(dendrogram: Dendrogram, G: int) -> Partition:
    """Partition into ``G`` clusters by undoing the last ``G - 1`` merges.

    Clusters are labelled ``1..G`` in order of their smallest member.
    """
    N = dendrogram.n_leaves
    if not 1 <= G <= N:
        raise TrajclusterError(f"G must lie in 1..{N}")
    parent = np.arange(2 * N - 1)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k in range(N - G):
        left, right = int(dendrogram.merges[k, 0]), int(dendrogram.merges[k, 1])
        parent[find(left)] = N + k
        parent[find(right)] = N + k
    labels = np.empty(N, dtype=np.int64)
    label_of: dict[int, int] = {}
    for i in range(N):
        labels[i] = label_of.setdefault(find(i), len(label_of) + 1)
    return Partition(labels, G)


# ------------------------------------------------------------------- k-medoids


def _assign(D: np.ndarray, medoids: np.ndarray):
    sub = D[:, medoids]
    nearest = np.argmin(sub, axis=1)
    return nearest, sub[np.arange(D.shape[0]), nearest]


def _cost(D, medoids) -> float:
    return float(D[:, medoids].min(axis=1).sum())


def _build(D: np.ndarray, G: int) -> list[int]:
    medoids = [int(np.argmin(D.sum(axis=1)))]
    near = D[:, medoids[0]].copy()
    for _ in range(1, G):
        gain = np.maximum(near[:, None] - D, 0.0).sum(axis=0)
        gain[medoids] = -np.inf
        m = int(np.argmax(gain))
        medoids.append(m)
        near = np.minimum(near, D[:, m])
    return medoids


def _swap(D: np.ndarray, medoids: list[int], trace: list):
    N = D.shape[0]
    med = np.array(medoids)
    G = med.size
    while True:
        sub = D[:, med]
        if G > 1:
            part = np.partition(sub, 1, axis=1)
            second = part[:, 1]
        else:
            second = np.full(N, np.inf)
        nearest_pos = np.argmin(sub, axis=1)
        nearest = sub[np.arange(N), nearest_pos]
        cost = float(nearest.sum())
        trace.append(cost)
        is_med = np.zeros(N, dtype=bool)
        is_med[med] = True
        best_delta, best = 0.0, None
        for pos in range(G):
            own = nearest_pos == pos
            # distance of every object to its medoid if medoid `pos` is replaced by candidate o
            base = np.where(own, second, nearest)
            new_cost = np.minimum(D, base[:, None]).sum(axis=0)
            new_cost[is_med] = np.inf
            o = int(np.argmin(new_cost))
            delta = new_cost[o] - cost
            if delta < best_delta - 1e-12 * max(cost, 1.0):
                best_delta, best = delta, (pos, o)
        if best is None:
            return med, cost
        med = med.copy()
        med[best[0]] = best[1]


def k_medoids(dist, G: int, n_starts: int = 1, seed: int = 0, return_trace: bool = False):
    """Partitioning around medoids.

    Start 0 uses the greedy BUILD initialization; further starts draw ``G``
    random objects. Each start runs SWAP: the exchange of a medoid and a
    non-medoid that lowers total cost the most is applied until no exchange
    lowers it. The lowest-cost start wins (ties to the earliest start).

    Returns ``(partition, medoids, cost)``; clusters are labelled by
    ascending medoid index, objects go to their nearest medoid (ties to the
    lower label). With ``return_trace`` the per-iteration costs of the
    winning start are appended to the tuple.
    """
    D = check_distance_matrix(dist)
    N = D.shape[0]
    if not 1 <= G <= N:
        raise TrajclusterError(f"G={G} must lie in 1..{N}")
    if n_starts < 1:
        raise TrajclusterError("n_starts must be >= 1")
    best = None
    for start in range(n_starts):
        if start == 0:
            init = _build(D, G)
        else:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(start,))))
            init = rng.choice(N, size=G, replace=False).tolist()
        trace: list = []
        med, cost = _swap(D, init, trace)
        if best is None or cost < best[1]:
            best = (med, cost, trace)
    med = np.sort(best[0])
    nearest, _ = _assign(D, med)
    out = (Partition(nearest + 1, G), med, _cost(D, med))
    return out + (best[2],) if return_trace else out


# ------------------------------------------------------------------ silhouette


def silhouette_values(dist, partition: Partition) -> np.ndarray:
    """Per-object silhouette ``(b - a) / max(a, b)``; singletons get 0."""
    D = check_distance_matrix(dist)
    labels = partition.labels - 1
    if D.shape[0] != labels.size:
        raise TrajclusterError("partition and distance matrix sizes differ")
    G = partition.G
    counts = np.bincount(labels, minlength=G)
    if G < 2:
        raise TrajclusterError("silhouette needs at least 2 clusters")
    if np.any(counts == 0):
        raise TrajclusterError("silhouette needs every cluster to be non-empty")
    onehot = np.zeros((labels.size, G))
    onehot[np.arange(labels.size), labels] = 1.0
    sums = D @ onehot
    own = counts[labels]
    idx = np.arange(labels.size)
    a = np.where(own > 1, sums[idx, labels] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[idx, labels] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return s


def average_silhouette_width(dist, partition: Partition) -> float:
    """Mean silhouette over all objects, in ``[-1, 1]``."""
    return float(silhouette_values(dist, partition).mean())

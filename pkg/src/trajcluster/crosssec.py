"""Cross-sectional clustering of aligned trajectories.

Both methods treat each subject's values on the shared grid as one vector:
KML is k-means on those vectors, LLPA a Gaussian mixture with local
independence (diagonal covariance, per time point or one variance per
cluster).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import AlignedMatrix, Partition, PosteriorMatrix, TrajclusterError
from .selection import bic as _bic

__all__ = [
    "KmlResult",
    "LpaModel",
    "kml_fit",
    "kml_bic",
    "kml_loglik",
    "llpa_fit",
    "kml_assign",
    "llpa_posterior",
    "kmeanspp_init",
    "SD_FLOOR",
]

log = logging.getLogger(__name__)

SD_FLOOR = 1e-3
KML_VAR_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


def _check_matrix(aligned: AlignedMatrix, G: int) -> np.ndarray:
    Y = np.asarray(aligned.matrix, dtype=float)
    if not np.all(np.isfinite(Y)):
        raise TrajclusterError("data contain non-finite values")
    if G < 1:
        raise TrajclusterError("G must be >= 1")
    if G > Y.shape[0]:
        raise TrajclusterError(f"G={G} exceeds the number of subjects ({Y.shape[0]})")
    return Y


def _id_order(aligned: AlignedMatrix) -> np.ndarray:
    return np.argsort(np.array(aligned.subject_ids, dtype=object), kind="stable")


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# --------------------------------------------------------------------- k-means


@dataclass
class KmlResult:
    centroids: np.ndarray
    partition: Partition
    wss: float
    bic_approx: float
    starts_used: int
    wss_trace: list = field(default_factory=list, repr=False)

    @property
    def G(self) -> int:
        return self.partition.G


def _sqdist(Y: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (Y * Y).sum(axis=1)[:, None] - 2.0 * Y @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeanspp_init(Y: np.ndarray, G: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centroid is a data point drawn with
    probability proportional to its squared distance to the nearest centroid."""
    N = Y.shape[0]
    idx = [int(rng.integers(N))]
    d2 = _sqdist(Y, Y[idx])[:, 0]
    for _ in range(1, G):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid
            nxt = int(rng.choice(np.setdiff1d(np.arange(N), idx)))
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, N - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, _sqdist(Y, Y[[nxt]])[:, 0])
    return Y[idx].copy()


def _repair_empty(labels, near, G):
    # reseed every empty cluster with the point farthest from its centroid,
    # never taking the only member of another cluster
    counts = np.bincount(labels, minlength=G)
    for g in np.flatnonzero(counts == 0):
        far = int(np.argmax(np.where(counts[labels] > 1, near, -1.0)))
        counts[labels[far]] -= 1
        counts[g] += 1
        labels[far] = g
        near[far] = 0.0
    return counts


def _centroids(Y, labels, counts, G):
    C = np.zeros((G, Y.shape[1]))
    np.add.at(C, labels, Y)
    return C / counts[:, None]


def _lloyd(Y: np.ndarray, C: np.ndarray, max_iter: int, tol: float):
    G = C.shape[0]
    N = Y.shape[0]
    trace = []
    for _ in range(max_iter):
        d2 = _sqdist(Y, C)
        labels = np.argmin(d2, axis=1)
        near = d2[np.arange(N), labels]
        trace.append(float(near.sum()))
        newC = _centroids(Y, labels, _repair_empty(labels, near, G), G)
        move = np.max(np.abs(newC - C)) if C.size else 0.0
        C = newC
        if move < tol:
            break
    d2 = _sqdist(Y, C)
    labels = np.argmin(d2, axis=1)
    counts = _repair_empty(labels, d2[np.arange(N), labels], G)
    C = _centroids(Y, labels, counts, G)
    wss = float(((Y - C[labels]) ** 2).sum())
    trace.append(wss)
    return C, labels, wss, trace


def kml_fit(
    aligned: AlignedMatrix,
    G: int,
    n_starts: int = 20,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-8,
    init_centroids: Optional[np.ndarray] = None,
) -> KmlResult:
    """Longitudinal k-means: Lloyd iterations from k-means++ seeds, best of ``n_starts``.

    ``init_centroids`` (``G x n``) replaces the random seeding with a single
    start from the given centroids. Clusters are returned ordered by
    descending mean level.
    """
    Y = _check_matrix(aligned, G)
    if n_starts < 1:
        raise TrajclusterError("n_starts must be >= 1")
    order = _id_order(aligned)
    Ys = Y[order]
    best = None
    if init_centroids is not None:
        C0 = np.asarray(init_centroids, dtype=float)
        if C0.shape != (G, Y.shape[1]):
            raise TrajclusterError(f"init_centroids must have shape {(G, Y.shape[1])}")
        starts = [C0]
    else:
        starts = (kmeanspp_init(Ys, G, _substream(seed, s)) for s in range(n_starts))
    used = 0
    for C0 in starts:
        used += 1
        res = _lloyd(Ys, C0, max_iter, tol)
        if best is None or res[2] < best[2]:
            best = res
    C, labels_sorted, wss, trace = best
    rank = np.argsort(-C.mean(axis=1), kind="stable")
    relabel = np.empty(G, dtype=np.intp)
    relabel[rank] = np.arange(G)
    labels = np.empty_like(labels_sorted)
    labels[order] = relabel[labels_sorted]
    result = KmlResult(C[rank], Partition(labels + 1, G), wss, float("nan"), used, trace)
    result.bic_approx = kml_bic(result, aligned)
    return result


def kml_loglik(result: KmlResult, aligned: AlignedMatrix) -> float:
    """Log-likelihood of the k-means fit under a spherical Gaussian with one
    common variance ``sigma2 = WSS / (N n)`` (floored at 1e-12)."""
    N, n = aligned.shape
    Y = np.asarray(aligned.matrix)
    resid = Y - result.centroids[result.partition.labels - 1]
    wss = float((resid**2).sum())
    s2 = max(wss / (N * n), KML_VAR_FLOOR)
    return -0.5 * N * n * (LOG_2PI + math.log(s2)) - wss / (2.0 * s2)


def kml_bic(result: KmlResult, aligned: AlignedMatrix, n_obs: Optional[int] = None) -> float:
    """BIC of :func:`kml_loglik` with ``p = G n + 1``; the sample size
    defaults to the number of observed values ``N n``."""
    N, n = aligned.shape
    return _bic(kml_loglik(result, aligned), result.G * n + 1, N * n if n_obs is None else n_obs)


# ------------------------------------------------------ latent profile analysis


@dataclass
class LpaModel:
    proportions: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    variance_mode: str
    loglik: float
    n_obs: int
    converged: bool = False
    n_iter: int = 0
    loglik_trace: list = field(default_factory=list, repr=False)
    flags: list = field(default_factory=list)

    @property
    def G(self) -> int:
        return self.proportions.size

    @property
    def n_params(self) -> int:
        return (self.G - 1) + self.means.size + self.sds.size

    def bic(self, n: Optional[int] = None) -> float:
        return _bic(self.loglik, self.n_params, self.n_obs if n is None else n)

    def to_dict(self) -> dict:
        return {
            "model": "trajcluster-llpa",
            "G": self.G,
            "variance_mode": self.variance_mode,
            "proportions": self.proportions.tolist(),
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
            "loglik": self.loglik,
            "n_params": self.n_params,
            "n_obs": self.n_obs,
            "bic": self.bic(),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "flags": list(self.flags),
        }


def _lpa_logdens(Y, means, sds):
    # (N, G): sum over time of log normal densities
    N, n = Y.shape
    out = np.empty((N, means.shape[0]))
    for g in range(means.shape[0]):
        sd = np.broadcast_to(sds[g], (n,))
        zs = (Y - means[g]) / sd
        out[:, g] = -0.5 * (zs * zs).sum(axis=1) - np.log(sd).sum() - 0.5 * n * LOG_2PI
    return out


def _lpa_estep(Y, props, means, sds):
    lp = _lpa_logdens(Y, means, sds) + np.log(props)[None, :]
    m = lp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
    z = np.exp(lp - lse[:, None])
    z /= z.sum(axis=1, keepdims=True)
    return float(np.sum(lse)), z


def _lpa_mstep(Y, z, mode):
    mass = z.sum(axis=0)
    props = mass / Y.shape[0]
    means = (z.T @ Y) / mass[:, None]
    G = z.shape[1]
    sq = np.stack([z[:, g] @ (Y - means[g]) ** 2 for g in range(G)])   # (G, n)
    if mode == "per-time":
        var = sq / mass[:, None]
    else:
        var = sq.sum(axis=1, keepdims=True) / (mass[:, None] * Y.shape[1])
    sds = np.maximum(np.sqrt(var), SD_FLOOR)
    return props, means, sds


def llpa_fit(
    aligned: AlignedMatrix,
    G: int,
    n_starts: int = 10,
    seed: int = 0,
    variance_mode: str = "per-time",
    max_iter: int = 500,
    tol: float = 1e-8,
) -> tuple[LpaModel, PosteriorMatrix]:
    """Latent profile analysis of aligned trajectories by EM.

    Each start seeds ``G`` profile means with k-means++, assigns subjects to
    the nearest seed and runs EM from the implied parameters until the
    relative log-likelihood change drops below ``tol``. Standard deviations
    are floored at :data:`SD_FLOOR`. A start whose smallest cluster carries
    less than ``1e-3 * N`` responsibility is discarded and retried.

    ``variance_mode="per-time"`` estimates one SD per cluster and time
    point, ``"tied"`` one SD per cluster.
    """
    if variance_mode not in ("per-time", "tied"):
        raise TrajclusterError(f"unknown variance mode {variance_mode!r}; use per-time or tied")
    Y = _check_matrix(aligned, G)
    if n_starts < 1:
        raise TrajclusterError("n_starts must be >= 1")
    order = _id_order(aligned)
    Ys = Y[order]
    N = Ys.shape[0]
    min_mass = 1e-3 * N
    best = None
    degenerate = 0
    for start in range(n_starts):
        for attempt in range(10):
            rng = _substream(seed, start, attempt)
            C = kmeanspp_init(Ys, G, rng)
            z = np.zeros((N, G))
            z[np.arange(N), np.argmin(_sqdist(Ys, C), axis=1)] = 1.0
            if z.sum(axis=0).min() < min_mass:
                degenerate += 1
                continue
            props, means, sds = _lpa_mstep(Ys, z, variance_mode)
            trace = []
            ok = True
            converged = False
            for it in range(max_iter):
                ll, z = _lpa_estep(Ys, props, means, sds)
                trace.append(ll)
                if z.sum(axis=0).min() < min_mass:
                    ok = False
                    break
                if it > 0 and abs(ll - trace[-2]) < tol * abs(trace[-2]):
                    converged = True
                    break
                props, means, sds = _lpa_mstep(Ys, z, variance_mode)
            if ok and not converged:
                ll, z = _lpa_estep(Ys, props, means, sds)
                trace.append(ll)
                ok = z.sum(axis=0).min() >= min_mass
            if ok:
                if best is None or trace[-1] > best[4][-1]:
                    best = (props, means, sds, z, trace, converged)
                break
            degenerate += 1
    if best is None:
        raise TrajclusterError(f"LLPA: all starts collapsed for G={G}")
    props, means, sds, z, trace, converged = best
    rank = np.argsort(-means.mean(axis=1), kind="stable")
    inverse = np.empty_like(order)
    inverse[order] = np.arange(N)
    flags = []
    if degenerate:
        flags.append(f"degenerate_restarts={degenerate}")
    if not converged:
        flags.append("not_converged")
    model = LpaModel(props[rank], means[rank], sds[rank], variance_mode, float(trace[-1]), Y.size,
                     converged, len(trace), list(trace), flags)
    return model, PosteriorMatrix(z[inverse][:, rank])


# ------------------------------------------------------------ new subjects


def _observed_rows(Y) -> tuple[np.ndarray, np.ndarray]:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    obs = ~np.isnan(Y)
    if np.any(np.isinf(Y)):
        raise TrajclusterError("values must be finite or NaN")
    return np.where(obs, Y, 0.0), obs


def kml_assign(centroids: np.ndarray, Y) -> np.ndarray:
    """Nearest-centroid labels (1-based) for rows of ``Y`` on the fitted grid.

    NaN marks grid points a subject was not observed at; distances use the
    observed points only. A row with no observations goes to cluster 1.
    """
    V, obs = _observed_rows(Y)
    C = np.asarray(centroids, dtype=float)
    d2 = np.stack([(((V - c) * obs) ** 2).sum(axis=1) for c in C], axis=1)
    return np.argmin(d2, axis=1) + 1


def llpa_posterior(model: LpaModel, Y) -> np.ndarray:
    """Posterior rows for ``Y`` on the fitted grid, NaN marking unobserved points.

    Local independence lets unobserved points drop out of the likelihood;
    an empty row returns the mixing proportions.
    """
    V, obs = _observed_rows(Y)
    n = V.shape[1]
    lp = np.empty((V.shape[0], model.G))
    for g in range(model.G):
        sd = np.broadcast_to(model.sds[g], (n,))
        zs = (V - model.means[g]) / sd
        terms = -0.5 * zs * zs - np.log(sd) - 0.5 * LOG_2PI
        lp[:, g] = np.where(obs, terms, 0.0).sum(axis=1)
    lp += np.log(model.proportions)[None, :]
    lp -= lp.max(axis=1, keepdims=True)
    z = np.exp(lp)
    return z / z.sum(axis=1, keepdims=True)

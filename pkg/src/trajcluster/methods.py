"""One calling convention for every clustering method.

:class:`MethodConfig` names a method and its options; :class:`Prepared`
caches the per-dataset work shared across cluster counts (alignment,
distance matrix, dendrogram, feature matrix); :func:`fit` runs one method at
one ``G`` and returns a :class:`FitOutcome` with the partition, the
likelihood terms where defined and a JSON-ready model document.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Optional

import numpy as np

from . import __version__
from .core import (
    AlignedMatrix,
    Dataset,
    Partition,
    PosteriorMatrix,
    TrajclusterError,
    align,
    hard_assign,
)

__all__ = ["METHODS", "MethodConfig", "Prepared", "FitOutcome", "fit", "assign"]

METHODS = ("kml", "llpa", "ahc", "kmedoids", "features", "gbtm", "gmm")
PROBABILISTIC = ("llpa", "gbtm", "gmm")
VARIANCE_CHOICES = ("free", "tied")


@dataclass(frozen=True)
class MethodConfig:
    """Method name plus every method-specific option (unused ones are ignored).

    ``variance="free"`` means per-cluster residual variances for GBTM/GMM
    and per-time SDs for LLPA; ``"tied"`` shares them. ``bic_n`` picks the
    BIC sample size: all observations or the number of subjects.
    """

    method: str
    n_starts: int = 20
    linkage: str = "average"
    basis: str = "poly:2"
    re: str = "intercept"
    variance: str = "free"
    re_tied: bool = False
    features: str = "b0,b1,b2,logN"
    max_iter: Optional[int] = None
    bic_n: str = "observations"

    def __post_init__(self):
        if self.method not in METHODS:
            raise TrajclusterError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.variance not in VARIANCE_CHOICES:
            raise TrajclusterError(f"unknown variance {self.variance!r}; use free or tied")
        if self.bic_n not in ("observations", "subjects"):
            raise TrajclusterError(f"unknown bic_n {self.bic_n!r}; use observations or subjects")
        if self.n_starts < 1:
            raise TrajclusterError("n_starts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class FitOutcome:
    method: str
    G: int
    partition: Partition
    posterior: Optional[PosteriorMatrix] = None
    loglik: Optional[float] = None
    n_params: Optional[int] = None
    n_obs: Optional[int] = None
    n_subjects: Optional[int] = None
    document: dict = field(default_factory=dict, repr=False)
    flags: list = field(default_factory=list)

    def bic(self, bic_n: str = "observations") -> Optional[float]:
        from .selection import bic

        if self.loglik is None or self.n_params is None:
            return None
        n = self.n_obs if bic_n == "observations" else self.n_subjects
        return bic(self.loglik, self.n_params, n)


class Prepared:
    """Dataset plus lazily computed, reusable derived inputs."""

    def __init__(self, dataset: Dataset, config: MethodConfig, attempts: Optional[Dataset] = None):
        self.dataset = dataset
        self.config = config
        self.attempts = attempts

    @cached_property
    def aligned(self) -> AlignedMatrix:
        return align(self.dataset)

    @cached_property
    def aligned_or_none(self) -> Optional[AlignedMatrix]:
        try:
            return self.aligned
        except TrajclusterError:
            return None

    @cached_property
    def distances(self) -> np.ndarray:
        from .distance import pairwise_distances

        return pairwise_distances(self.aligned)

    @cached_property
    def dendrogram(self):
        from .distance import ahc

        return ahc(self.distances, self.config.linkage)

    @cached_property
    def raw_features(self):
        from .features import FeatureConfig, extract_features

        cfg = FeatureConfig.from_names(self.config.features.split(","))
        return extract_features(self.dataset, cfg, self.attempts)

    @cached_property
    def features(self):
        from .features import standardize

        return standardize(self.raw_features)

    @cached_property
    def feature_distances(self) -> np.ndarray:
        from .distance import pairwise_distances

        return pairwise_distances(self.features.values)

    def silhouette_distances(self) -> Optional[np.ndarray]:
        """Distances the ASW is computed on: feature space for the feature
        method, aligned Euclidean otherwise (None if not alignable)."""
        if self.config.method == "features":
            return self.feature_distances
        if self.aligned_or_none is None:
            return None
        return self.distances


def _base_doc(method: str, G: int, config: MethodConfig) -> dict:
    return {"model": f"trajcluster-{method}", "software_version": __version__, "method": method,
            "G": G, "config": config.to_dict()}


def fit(prep: Prepared, G: int, seed: int) -> FitOutcome:
    """Fit ``prep.config.method`` with ``G`` clusters."""
    cfg = prep.config
    ds = prep.dataset
    m = cfg.method
    ids = list(ds.subject_ids)
    if m == "kml":
        from .crosssec import kml_fit, kml_loglik

        A = prep.aligned
        res = kml_fit(A, G, n_starts=cfg.n_starts, seed=seed, **_iters(cfg))
        N, n = A.shape
        doc = _base_doc(m, G, cfg) | {
            "grid": A.grid.tolist(), "centroids": res.centroids.tolist(), "wss": res.wss,
            "bic": res.bic_approx,
        }
        return FitOutcome(m, G, res.partition, None, kml_loglik(res, A), G * n + 1, N * n, N, doc)
    if m == "llpa":
        from .crosssec import llpa_fit

        A = prep.aligned
        mode = "per-time" if cfg.variance == "free" else "tied"
        model, z = llpa_fit(A, G, n_starts=cfg.n_starts, seed=seed, variance_mode=mode, **_iters(cfg))
        doc = _base_doc(m, G, cfg) | model.to_dict() | {"model": "trajcluster-llpa", "grid": A.grid.tolist()}
        return FitOutcome(m, G, hard_assign(z), z, model.loglik, model.n_params, model.n_obs,
                          A.shape[0], doc, list(model.flags))
    if m == "ahc":
        from .distance import cut_dendrogram

        dend = prep.dendrogram
        part = cut_dendrogram(dend, G)
        doc = _base_doc(m, G, cfg) | {"linkage": cfg.linkage, "merge_heights": dend.heights.tolist()}
        return FitOutcome(m, G, part, document=doc)
    if m == "kmedoids":
        from .distance import k_medoids

        part, med, cost = k_medoids(prep.distances, G, cfg.n_starts, seed)
        doc = _base_doc(m, G, cfg) | {
            "grid": prep.aligned.grid.tolist(), "medoids": [ids[i] for i in med], "cost": cost,
            "medoid_values": prep.aligned.matrix[med].tolist(),
        }
        return FitOutcome(m, G, part, document=doc)
    if m == "features":
        from .features import feature_cluster

        fm, raw = prep.features, prep.raw_features
        part, med = feature_cluster(fm, G, cfg.n_starts, seed)
        doc = _base_doc(m, G, cfg) | {
            "features": list(fm.names), "medoids": [ids[i] for i in med],
            "medoid_features": raw.values[med].tolist(),
            "feature_mean": raw.values.mean(axis=0).tolist(),
            "feature_sd": raw.values.std(axis=0, ddof=1).tolist(),
            "constant_columns": list(fm.constant_columns),
            "attempt_source": "values" if prep.attempts is None else "external",
        }
        flags = [f"degenerate_subjects={len(fm.degenerate)}"] if fm.degenerate else []
        return FitOutcome(m, G, part, document=doc, flags=flags)
    # gbtm / gmm
    from .mixture import Basis, gbtm_fit, gmm_fit

    basis = Basis.parse(cfg.basis)
    mode = "per-cluster" if cfg.variance == "free" else "tied"
    if m == "gbtm":
        model, z = gbtm_fit(ds, basis, G, n_starts=cfg.n_starts, seed=seed, variance_mode=mode, **_iters(cfg))
    else:
        model, z = gmm_fit(ds, basis, cfg.re, G, n_starts=cfg.n_starts, seed=seed, variance_mode=mode,
                           re_tied=cfg.re_tied, **_iters(cfg))
    doc = model.to_dict() | {"config": cfg.to_dict()}
    return FitOutcome(m, G, hard_assign(z), z, model.loglik, model.n_params, model.n_obs,
                      model.n_subjects, doc, list(model.flags))


def _iters(cfg: MethodConfig) -> dict:
    return {} if cfg.max_iter is None else {"max_iter": cfg.max_iter}


def curves(prep: Prepared, outcome: FitOutcome) -> tuple[np.ndarray, np.ndarray]:
    """Cluster mean curves ``(times, G x T)`` for reporting."""
    from .core import partition_means

    doc = outcome.document
    if outcome.method == "kml":
        return np.asarray(doc["grid"]), np.asarray(doc["centroids"])
    if outcome.method == "llpa":
        return np.asarray(doc["grid"]), np.asarray(doc["means"])
    if outcome.method in ("gbtm", "gmm"):
        from .mixture import MixtureModel, cluster_means

        times = np.unique(prep.dataset.to_long()[1])
        return times, cluster_means(MixtureModel.from_dict(doc), times)
    return partition_means(prep.dataset, outcome.partition)


def assign(document: dict, dataset: Dataset, attempts: Optional[Dataset] = None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Cluster new (possibly partial) trajectories with a saved model document.

    Returns 1-based labels and, for probabilistic models, the posterior
    matrix. Grid-based models (KML, LLPA, k-medoids) need the new times to
    lie on the fitted grid. ``attempts`` is passed to feature extraction for
    feature models fitted with an external attempt series.
    """
    kind = document.get("model", "")
    if kind == "trajcluster-mixture":
        from .mixture import MixtureModel, posterior

        model = MixtureModel.from_dict(document)
        z = np.vstack([posterior(model, tr) for tr in dataset])
        return np.argmax(z, axis=1) + 1, z
    if kind in ("trajcluster-kml", "trajcluster-llpa", "trajcluster-kmedoids"):
        grid = np.asarray(document["grid"], dtype=float)
        Y = _on_grid(dataset, grid)
        if kind == "trajcluster-llpa":
            from .crosssec import LpaModel, llpa_posterior

            model = LpaModel(np.asarray(document["proportions"]), np.asarray(document["means"]),
                             np.asarray(document["sds"]), document["variance_mode"], document["loglik"], 0)
            z = llpa_posterior(model, Y)
            return np.argmax(z, axis=1) + 1, z
        from .crosssec import kml_assign

        key = "centroids" if kind == "trajcluster-kml" else "medoid_values"
        return kml_assign(np.asarray(document[key]), Y), None
    if kind == "trajcluster-features":
        from .features import FeatureConfig, extract_features

        cfg = FeatureConfig.from_names(document["features"])
        if document.get("attempt_source") == "external" and attempts is None:
            raise TrajclusterError("this feature model counts attempts on a separate series; supply it")
        mean = np.asarray(document["feature_mean"])
        sd = np.asarray(document["feature_sd"])
        const = set(document.get("constant_columns", []))
        scale = np.array([0.0 if n in const else 1.0 / s for n, s in zip(cfg.names, sd)])
        med = (np.asarray(document["medoid_features"]) - mean) * scale
        X = (extract_features(dataset, cfg, attempts).values - mean) * scale
        d2 = ((X[:, None, :] - med[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1) + 1, None
    raise TrajclusterError(f"model type {kind!r} does not support assignment")


def _on_grid(dataset: Dataset, grid: np.ndarray, tolerance: float = 1e-9) -> np.ndarray:
    Y = np.full((len(dataset), grid.size), np.nan)
    for i, tr in enumerate(dataset):
        k = np.searchsorted(grid, tr.times)
        k = np.clip(k, 0, grid.size - 1)
        lo = np.clip(k - 1, 0, grid.size - 1)
        k = np.where(np.abs(grid[lo] - tr.times) < np.abs(grid[k] - tr.times), lo, k)
        if np.any(np.abs(grid[k] - tr.times) > tolerance):
            raise TrajclusterError(f"subject {tr.subject_id!r} has times off the fitted grid")
        Y[i, k] = tr.values
    return Y


def dump_document(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

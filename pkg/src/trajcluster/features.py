"""Per-subject trajectory features and feature-based clustering.

Every subject is summarized by the least-squares coefficients of its own
values on an orthonormal polynomial basis (intercept, linear, quadratic),
optionally with the residual SD, the log of the number of attempted
observations and the lag-1 autocorrelation of the residuals. The features
are standardized and clustered with k-medoids on Euclidean distances.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, Partition, TrajclusterError, Trajectory
from .distance import k_medoids, pairwise_distances

__all__ = [
    "FeatureConfig",
    "FeatureMatrix",
    "FEATURE_NAMES",
    "orthonormal_poly",
    "its_features",
    "extract_features",
    "standardize",
    "feature_cluster",
]

FEATURE_NAMES = ("b_intercept", "b_linear", "b_quad", "resid_sd", "log_attempts", "ac1")

# short aliases accepted on the command line
ALIASES = {
    "b0": "b_intercept",
    "b1": "b_linear",
    "b2": "b_quad",
    "sd": "resid_sd",
    "logN": "log_attempts",
    "ac1": "ac1",
}

_ZERO_RESID = 1e-10


@dataclass(frozen=True)
class FeatureConfig:
    include_intercept: bool = True
    include_linear: bool = True
    include_quadratic: bool = True
    include_residual_sd: bool = False
    include_log_attempts: bool = True
    include_lag1_autocorr: bool = False
    attempt_threshold: float = 0.0

    def __post_init__(self):
        if not any(self._flags()):
            raise TrajclusterError("at least one feature must be enabled")

    def _flags(self):
        return (self.include_intercept, self.include_linear, self.include_quadratic,
                self.include_residual_sd, self.include_log_attempts, self.include_lag1_autocorr)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, on in zip(FEATURE_NAMES, self._flags()) if on)

    @property
    def degree(self) -> int:
        """Degree of the per-subject polynomial fit."""
        if self.include_quadratic:
            return 2
        if self.include_linear:
            return 1
        return 0

    @classmethod
    def from_names(cls, names: Sequence[str], attempt_threshold: float = 0.0) -> "FeatureConfig":
        """Build a config from feature names or their short aliases (``b0,b1,b2,sd,logN,ac1``)."""
        full = []
        for n in names:
            n = n.strip()
            full.append(ALIASES.get(n, n))
        unknown = set(full) - set(FEATURE_NAMES)
        if unknown:
            raise TrajclusterError(f"unknown feature(s): {', '.join(sorted(unknown))}")
        on = [f in full for f in FEATURE_NAMES]
        return cls(*on, attempt_threshold=attempt_threshold)


@dataclass(frozen=True)
class FeatureMatrix:
    subject_ids: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray
    standardized: bool = False
    constant_columns: tuple[str, ...] = ()
    degenerate: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.subject_ids), len(self.names)):
            raise TrajclusterError("feature matrix shape does not match ids and names")
        if not np.all(np.isfinite(v)):
            raise TrajclusterError("features must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_csv(self, dest) -> None:
        close = isinstance(dest, (str, os.PathLike))
        fh = open(dest, "w", encoding="utf-8", newline="") if close else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("subject_id",) + self.names)
            for sid, row in zip(self.subject_ids, self.values.tolist()):
                w.writerow((sid,) + tuple(repr(x) for x in row))
        finally:
            if close:
                fh.close()


def orthonormal_poly(times, degree: int) -> np.ndarray:
    """Columns ``1, p1(t), ..., p_degree(t)`` orthonormal under ``<f, g> = mean(f g)``.

    Obtained by Gram-Schmidt (QR) on ``1, t, t**2, ...``; each column's
    leading-power coefficient is positive and the first column is all ones.
    """
    t = np.asarray(times, dtype=float)
    n = t.size
    if n < degree + 1:
        raise TrajclusterError(f"need at least {degree + 1} points for degree {degree}")
    tc = t - t.mean()
    V = np.vander(tc, degree + 1, increasing=True)
    Q, R = np.linalg.qr(V)
    if np.any(np.abs(np.diag(R)) <= 1e-12 * max(1.0, np.abs(np.diag(R)).max())):
        raise TrajclusterError("times do not support the requested polynomial degree")
    return Q * np.sign(np.diag(R))[None, :] * np.sqrt(n)


def its_features(
    trajectory: Trajectory,
    config: FeatureConfig = FeatureConfig(),
    attempt_values: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, bool]:
    """Feature vector of one trajectory in the order of ``config.names``.

    Attempts are counted on ``attempt_values`` when given (e.g. the daily
    series behind block-averaged data), otherwise on the trajectory values.
    Returns ``(features, degenerate)``; ``degenerate`` is True when the
    polynomial fits the values exactly, in which case the residual SD is 0
    and the lag-1 autocorrelation is reported as 0.
    """
    t, y = trajectory.times, trajectory.values
    n = y.size
    k = config.degree + 1
    need = k + 1 if config.include_residual_sd else k
    if n < need:
        raise TrajclusterError(f"subject {trajectory.subject_id!r}: {n} observations, need {need}")
    if config.degree >= 1 and np.ptp(t) == 0:
        raise TrajclusterError(f"subject {trajectory.subject_id!r}: single time point, slope undefined")
    try:
        P = orthonormal_poly(t, config.degree)
    except TrajclusterError as e:
        raise TrajclusterError(f"subject {trajectory.subject_id!r}: {e}") from None
    coef = P.T @ y / n
    resid = y - P @ coef
    rss = float(resid @ resid)
    degenerate = rss <= (_ZERO_RESID * max(1.0, float(np.abs(y).max()))) ** 2 * n
    out = []
    if config.include_intercept:
        out.append(coef[0])
    if config.include_linear:
        out.append(coef[1])
    if config.include_quadratic:
        out.append(coef[2])
    if config.include_residual_sd:
        out.append(0.0 if degenerate else np.sqrt(rss / (n - k)))
    if config.include_log_attempts:
        a = y if attempt_values is None else np.asarray(attempt_values, dtype=float)
        out.append(np.log1p(np.count_nonzero(a > config.attempt_threshold)))
    if config.include_lag1_autocorr:
        out.append(0.0 if degenerate or n < 2 else float(resid[:-1] @ resid[1:]) / rss)
    return np.array(out, dtype=float), bool(degenerate)


def extract_features(
    dataset: Dataset,
    config: FeatureConfig = FeatureConfig(),
    attempts: Optional[Dataset] = None,
) -> FeatureMatrix:
    """Feature matrix of a dataset; rows follow the dataset's subject order.

    ``attempts`` optionally supplies, per subject id, the series on which
    attempted observations are counted (for instance daily data when
    ``dataset`` holds block means).
    """
    source = None
    if attempts is not None:
        source = {tr.subject_id: tr.values for tr in attempts}
        missing = [sid for sid in dataset.subject_ids if sid not in source]
        if missing:
            raise TrajclusterError(f"no attempt series for subject(s): {', '.join(map(repr, missing[:5]))}")
    rows, degenerate = [], []
    for tr in dataset:
        f, deg = its_features(tr, config, None if source is None else source[tr.subject_id])
        rows.append(f)
        if deg:
            degenerate.append(tr.subject_id)
    return FeatureMatrix(tuple(dataset.subject_ids), config.names, np.vstack(rows),
                         degenerate=tuple(degenerate))


def standardize(fm: FeatureMatrix) -> FeatureMatrix:
    """Center and scale every column (SD with divisor ``N - 1``); constant columns become 0."""
    X = fm.values
    if X.shape[0] < 2:
        raise TrajclusterError("standardization needs at least 2 rows")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    Z = (X - mean) / np.where(const, 1.0, sd)
    Z[:, const] = 0.0
    names = tuple(n for n, c in zip(fm.names, const) if c)
    return FeatureMatrix(fm.subject_ids, fm.names, Z, True, names, fm.degenerate)


def feature_cluster(fm: FeatureMatrix, G: int, n_starts: int = 1, seed: int = 0) -> tuple[Partition, np.ndarray]:
    """k-medoids on Euclidean distances between feature rows.

    Returns the partition and the medoid row indices.
    """
    if not fm.standardized:
        warnings.warn("clustering unstandardized features", stacklevel=2)
    D = pairwise_distances(fm.values)
    partition, medoids, _ = k_medoids(D, G, n_starts, seed)
    return partition, medoids

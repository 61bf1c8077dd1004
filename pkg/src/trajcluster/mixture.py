"""Longitudinal Gaussian mixtures: group-based trajectory models and growth mixtures.

Both models describe cluster ``g`` by a regression curve ``x(t) @ beta_g`` on
a polynomial or cubic B-spline basis. A GBTM treats observations within a
subject as independent given the cluster; a GMM adds normally distributed
subject-level random effects on the intercept (``re="intercept"``) or on every
basis column with a diagonal covariance (``re="basis"``). Random effects are
integrated out, so each cluster density is a multivariate normal with
covariance ``Z D Z' + sigma2 I``.

Estimation is EM with random hard-assignment starts. For the GMM the M-step
is a conditional maximization: responsibility-weighted GLS for ``beta_g`` at
the current variance components, followed by one EM update of the variance
components with ``beta_g`` held fixed. Each step cannot decrease the
weighted marginal log-likelihood, so the observed log-likelihood is
non-decreasing across iterations.

All per-subject work goes through sufficient statistics (``X'X``, ``X'y``,
``y'y``, ``n``), so irregular and partially observed trajectories are
handled without alignment.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .core import Dataset, PosteriorMatrix, TrajclusterError, Trajectory
from .selection import bic as _bic

__all__ = [
    "Basis",
    "MixtureModel",
    "FitError",
    "basis_matrix",
    "gbtm_fit",
    "gmm_fit",
    "posterior",
    "posterior_matrix",
    "cluster_means",
    "marginal_mean",
    "sample",
    "model_from_parameters",
    "save_model",
    "load_model",
    "SIGMA2_FLOOR",
]

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-6
DEGENERATE_FRACTION = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


class FitError(TrajclusterError):
    pass


# ------------------------------------------------------------------------ basis


@dataclass(frozen=True)
class Basis:
    """Trajectory basis.

    ``kind="polynomial"``: columns ``1, t, ..., t**degree``.
    ``kind="bspline"``: clamped B-splines of ``degree`` (3) with
    ``n_interior_knots`` equally spaced interior knots over ``span``; columns
    ordered by their leftmost knot. ``span`` is fixed when the basis is first
    used on data (see :meth:`fitted`).
    """

    kind: str = "polynomial"
    degree: int = 2
    n_interior_knots: int = 0
    span: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in ("polynomial", "bspline"):
            raise TrajclusterError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise TrajclusterError("basis degree must be >= 0")
        if self.kind == "bspline":
            if self.degree != 3:
                raise TrajclusterError("only cubic B-splines are supported")
            if self.n_interior_knots < 0:
                raise TrajclusterError("n_interior_knots must be >= 0")
        if self.span is not None:
            lo, hi = map(float, self.span)
            if not hi > lo:
                raise TrajclusterError("basis span must have positive width")
            object.__setattr__(self, "span", (lo, hi))

    @property
    def q(self) -> int:
        if self.kind == "polynomial":
            return self.degree + 1
        return self.n_interior_knots + self.degree + 1

    @classmethod
    def parse(cls, text: str) -> "Basis":
        """Parse ``poly:D`` or ``bspline:3:K``."""
        parts = text.strip().split(":")
        try:
            if parts[0] in ("poly", "polynomial") and len(parts) == 2:
                return cls("polynomial", int(parts[1]))
            if parts[0] == "bspline" and len(parts) == 3:
                return cls("bspline", int(parts[1]), int(parts[2]))
        except ValueError:
            pass
        raise TrajclusterError(f"cannot parse basis {text!r}; use poly:D or bspline:3:K")

    def fitted(self, times) -> "Basis":
        """Return a copy whose span covers ``times`` (no-op for polynomials or a set span)."""
        if self.kind != "bspline" or self.span is not None:
            return self
        t = np.asarray(times, dtype=float)
        return replace(self, span=(float(t.min()), float(t.max())))

    def knots(self) -> np.ndarray:
        if self.kind != "bspline":
            raise TrajclusterError("polynomial bases have no knots")
        if self.span is None:
            raise TrajclusterError("B-spline span not set; call Basis.fitted(times)")
        lo, hi = self.span
        inner = np.linspace(lo, hi, self.n_interior_knots + 2)
        k = self.degree
        return np.concatenate([np.full(k, lo), inner, np.full(k, hi)])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "degree": self.degree,
            "n_interior_knots": self.n_interior_knots,
            "span": list(self.span) if self.span is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Basis":
        span = d.get("span")
        return cls(d["kind"], int(d["degree"]), int(d.get("n_interior_knots", 0)),
                   tuple(span) if span is not None else None)


def _bspline_columns(t: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Cox-de Boor recursion for all basis functions at once."""
    n_basis = knots.size - degree - 1
    # degree-0 indicators on half-open intervals; the right end belongs to
    # the last non-empty interval so the basis is a partition of unity there
    B = ((t[:, None] >= knots[None, :-1]) & (t[:, None] < knots[None, 1:])).astype(float)
    last = np.flatnonzero(knots[:-1] < knots[1:])[-1]
    B[t == knots[-1], last] = 1.0
    for k in range(1, degree + 1):
        nxt = np.zeros((t.size, knots.size - k - 1))
        for i in range(knots.size - k - 1):
            left_den = knots[i + k] - knots[i]
            right_den = knots[i + k + 1] - knots[i + 1]
            if left_den > 0:
                nxt[:, i] += (t - knots[i]) / left_den * B[:, i]
            if right_den > 0:
                nxt[:, i] += (knots[i + k + 1] - t) / right_den * B[:, i + 1]
        B = nxt
    assert B.shape[1] == n_basis
    return B


def basis_matrix(times, basis: Basis) -> np.ndarray:
    """Design matrix (``len(times)`` x ``basis.q``) of ``basis`` at ``times``."""
    t = np.asarray(times, dtype=float).ravel()
    if not np.all(np.isfinite(t)):
        raise TrajclusterError("basis times must be finite")
    if basis.kind == "polynomial":
        return np.vander(t, basis.degree + 1, increasing=True)
    basis = basis.fitted(t) if t.size else basis
    lo, hi = basis.span
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    if t.size and (t.min() < lo - tol or t.max() > hi + tol):
        raise TrajclusterError(
            f"time outside the B-spline knot span [{lo}, {hi}]: {t.min()}..{t.max()}"
        )
    return _bspline_columns(np.clip(t, lo, hi), basis.knots(), basis.degree)


# ---------------------------------------------------------------------- model

RE_SPECS = ("none", "intercept", "basis", "basis-full")


def _re_size(re: str, q: int) -> int:
    return {"none": 0, "intercept": 1, "basis": q, "basis-full": q}[re]


def _re_n_params(re: str, r: int) -> int:
    if re == "basis-full":
        return r * (r + 1) // 2
    return r


@dataclass
class MixtureModel:
    """Fitted longitudinal mixture.

    ``re_cov`` has shape ``(G, r, r)``: ``r = 0`` for a GBTM, ``1`` for a
    random intercept, ``q`` for random effects on every basis column
    (diagonal for ``re="basis"``, unstructured for ``re="basis-full"``).
    Clusters are stored in canonical order: descending fitted level at the
    midpoint of the observed time range.
    """

    method: str
    basis: Basis
    proportions: np.ndarray
    coefficients: np.ndarray
    sigma2: np.ndarray
    re: str = "none"
    re_cov: Optional[np.ndarray] = None
    variance_mode: str = "per-cluster"
    re_tied: bool = False
    loglik: float = float("nan")
    n_obs: int = 0
    n_subjects: int = 0
    time_range: tuple[float, float] = (0.0, 1.0)
    converged: bool = False
    n_iter: int = 0
    loglik_trace: list = field(default_factory=list, repr=False)
    flags: list = field(default_factory=list)
    version: str = __version__

    def __post_init__(self):
        if self.re_cov is None:
            self.re_cov = np.zeros((self.G, 0, 0))

    @property
    def G(self) -> int:
        return int(self.proportions.size)

    @property
    def r(self) -> int:
        return int(self.re_cov.shape[1])

    @property
    def n_params(self) -> int:
        G, q = self.G, self.basis.q
        n = (G - 1) + G * q + (1 if self.variance_mode == "tied" else G)
        k = _re_n_params(self.re, self.r)
        n += k if self.re_tied else G * k
        return n

    def bic(self, n: Optional[int] = None) -> float:
        return _bic(self.loglik, self.n_params, self.n_obs if n is None else n)

    def re_sd(self) -> np.ndarray:
        """Square roots of the diagonals of the random-effect covariances, ``(G, r)``."""
        return np.sqrt(np.maximum(np.einsum("gii->gi", self.re_cov), 0.0))

    def to_dict(self) -> dict:
        return {
            "model": "trajcluster-mixture",
            "software_version": self.version,
            "method": self.method,
            "G": self.G,
            "basis": self.basis.to_dict(),
            "re": self.re,
            "variance_mode": self.variance_mode,
            "re_tied": self.re_tied,
            "proportions": self.proportions.tolist(),
            "coefficients": self.coefficients.tolist(),
            "sigma2": self.sigma2.tolist(),
            "re_cov": self.re_cov.tolist(),
            "loglik": self.loglik,
            "n_params": self.n_params,
            "n_obs": self.n_obs,
            "n_subjects": self.n_subjects,
            "bic": self.bic(),
            "time_range": list(self.time_range),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureModel":
        if d.get("model") != "trajcluster-mixture":
            raise TrajclusterError("not a mixture model document")
        G = int(d["G"])
        basis = Basis.from_dict(d["basis"])
        re = d.get("re", "none")
        r = _re_size(re, basis.q)
        return cls(
            method=d["method"],
            basis=basis,
            proportions=np.asarray(d["proportions"], dtype=float),
            coefficients=np.asarray(d["coefficients"], dtype=float).reshape(G, -1),
            sigma2=np.asarray(d["sigma2"], dtype=float),
            re=re,
            re_cov=np.asarray(d.get("re_cov", []), dtype=float).reshape(G, r, r),
            variance_mode=d.get("variance_mode", "per-cluster"),
            re_tied=bool(d.get("re_tied", False)),
            loglik=float(d["loglik"]),
            n_obs=int(d.get("n_obs", 0)),
            n_subjects=int(d.get("n_subjects", 0)),
            time_range=tuple(d.get("time_range", (0.0, 1.0))),
            converged=bool(d.get("converged", False)),
            n_iter=int(d.get("n_iter", 0)),
            flags=list(d.get("flags", [])),
            version=d.get("software_version", __version__),
        )


def save_model(model: MixtureModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")


def load_model(path) -> MixtureModel:
    with open(path, "r", encoding="utf-8") as fh:
        return MixtureModel.from_dict(json.load(fh))


# -------------------------------------------------------- sufficient statistics


@dataclass
class _Stats:
    n: np.ndarray       # (N,)
    XtX: np.ndarray     # (N, q, q)
    Xty: np.ndarray     # (N, q)
    yty: np.ndarray     # (N,)

    @property
    def N(self) -> int:
        return self.n.size


def _stats_from_arrays(idx: np.ndarray, X: np.ndarray, y: np.ndarray, N: int) -> _Stats:
    q = X.shape[1]
    XtX = np.zeros((N, q, q))
    Xty = np.zeros((N, q))
    yty = np.zeros(N)
    np.add.at(XtX, idx, X[:, :, None] * X[:, None, :])
    np.add.at(Xty, idx, X * y[:, None])
    np.add.at(yty, idx, y * y)
    n = np.bincount(idx, minlength=N).astype(float)
    return _Stats(n, XtX, Xty, yty)


def _dataset_stats(dataset: Dataset, basis: Basis) -> _Stats:
    idx, t, y = dataset.to_long()
    return _stats_from_arrays(idx, basis_matrix(t, basis), y, len(dataset))


def _rss(st: _Stats, beta: np.ndarray) -> np.ndarray:
    rss = st.yty - 2.0 * st.Xty @ beta + np.einsum("i,nij,j->n", beta, st.XtX, beta)
    return np.maximum(rss, 0.0)


# ------------------------------------------------------------ cluster densities


@dataclass
class _Cluster:
    beta: np.ndarray
    sigma2: float
    D: np.ndarray          # random-effect covariance, (r, r)


def _psd_factor(D: np.ndarray) -> np.ndarray:
    """``L`` with ``L @ L.T == D`` for a symmetric PSD ``D`` (zero variances allowed)."""
    if D.size == 0:
        return D
    if np.count_nonzero(D - np.diag(np.diag(D))) == 0:
        return np.diag(np.sqrt(np.maximum(np.diag(D), 0.0)))
    lam, V = np.linalg.eigh((D + D.T) / 2.0)
    return V * np.sqrt(np.maximum(lam, 0.0))[None, :]


def _gbtm_logdens(st: _Stats, c: _Cluster) -> np.ndarray:
    return -0.5 * (st.n * (LOG_2PI + math.log(c.sigma2)) + _rss(st, c.beta) / c.sigma2)


class _REView:
    """Random-effect blocks ``Z'Z``, ``Z'X``, ``Z'y`` with ``Z = X[:, idx]``."""

    def __init__(self, st: _Stats, idx: np.ndarray):
        self.idx = idx
        self.ZtZ = st.XtX[:, idx][:, :, idx]
        self.ZtX = st.XtX[:, idx, :]
        self.Zty = st.Xty[:, idx]
        self.eye = np.eye(idx.size)

    def woodbury(self, c: _Cluster):
        """Return ``L``, ``M^{-1}``, ``log|M|`` with ``M = I + L' Z'Z L / sigma2``.

        Then ``V^{-1} = (I - Z L M^{-1} L' Z' / sigma2) / sigma2`` and
        ``log|V| = n log(sigma2) + log|M|``.
        """
        L = _psd_factor(c.D)
        M = self.eye + np.einsum("ki,nkl,lj->nij", L, self.ZtZ, L) / c.sigma2
        Minv = np.linalg.inv(M)
        _, logdet = np.linalg.slogdet(M)
        return L, Minv, logdet


def _gmm_logdens(st: _Stats, rv: _REView, c: _Cluster) -> np.ndarray:
    L, Minv, logdet = rv.woodbury(c)
    w = (rv.Zty - rv.ZtX @ c.beta) @ L
    corr = np.einsum("ni,nij,nj->n", w, Minv, w)
    quad = (_rss(st, c.beta) - corr / c.sigma2) / c.sigma2
    return -0.5 * (st.n * (LOG_2PI + math.log(c.sigma2)) + logdet + quad)


def _gls_beta(st: _Stats, rv: Optional[_REView], c: _Cluster, w: np.ndarray) -> np.ndarray:
    """Responsibility-weighted generalized least squares for one cluster curve."""
    A = np.einsum("n,nij->ij", w, st.XtX)
    b = w @ st.Xty
    if rv is not None and np.any(c.D != 0):
        L, Minv, _ = rv.woodbury(c)
        LZX = np.einsum("ki,nkj->nij", L, rv.ZtX)
        LZy = rv.Zty @ L
        A = A - np.einsum("n,nki,nkl,nlj->ij", w, LZX, Minv, LZX) / c.sigma2
        b = b - np.einsum("n,nki,nkl,nl->i", w, LZX, Minv, LZy) / c.sigma2
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _re_moments(st: _Stats, rv: _REView, c: _Cluster):
    """Per subject ``E[u u']`` under the posterior of the random effects, and
    the expected residual sum of squares ``E|y - X beta - Z u|^2``."""
    L, Minv, _ = rv.woodbury(c)
    C = np.einsum("ik,nkl,jl->nij", L, Minv, L)
    Ztr = rv.Zty - rv.ZtX @ c.beta
    u = np.einsum("nij,nj->ni", C, Ztr) / c.sigma2
    uu = u[:, :, None] * u[:, None, :] + C
    ess = (_rss(st, c.beta) - 2.0 * np.einsum("ni,ni->n", u, Ztr)
           + np.einsum("nij,nij->n", rv.ZtZ, uu))
    return uu, np.maximum(ess, 0.0)


# ---------------------------------------------------------------------- engine


@dataclass
class _Options:
    G: int
    re: str
    re_idx: Optional[np.ndarray]
    variance_mode: str
    re_tied: bool
    re_zero: bool
    max_iter: int
    tol: float


def _logdens(st, rv, clusters):
    if rv is None:
        return np.column_stack([_gbtm_logdens(st, c) for c in clusters])
    return np.column_stack([_gmm_logdens(st, rv, c) for c in clusters])


def _estep(st, rv, props, clusters):
    lp = _logdens(st, rv, clusters) + np.log(props)[None, :]
    m = lp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
    z = np.exp(lp - lse[:, None])
    z /= z.sum(axis=1, keepdims=True)
    return float(np.sum(lse)), z


def _constrain(D: np.ndarray, re: str) -> tuple[np.ndarray, bool]:
    """Apply the covariance structure; clip negative eigenvalues (flagged)."""
    if re != "basis-full":
        d = np.diag(D)
        return np.diag(np.maximum(d, 0.0)), bool(np.any(d < 0))
    D = (D + D.T) / 2.0
    lam, V = np.linalg.eigh(D)
    if np.any(lam < 0):
        return (V * np.maximum(lam, 0.0)) @ V.T, True
    return D, False


def _mstep(st, rv, z, clusters, opt: _Options):
    G = opt.G
    props = z.mean(axis=0)
    new = [_Cluster(_gls_beta(st, rv, clusters[g], z[:, g]), clusters[g].sigma2, clusters[g].D.copy())
           for g in range(G)]
    r = 0 if rv is None else rv.idx.size
    num_s2 = np.zeros(G)
    den_s2 = np.zeros(G)
    num_D = np.zeros((G, r, r))
    den_D = np.zeros(G)
    for g, c in enumerate(new):
        w = z[:, g]
        if rv is None or opt.re_zero:
            ess = _rss(st, c.beta)
        else:
            uu, ess = _re_moments(st, rv, c)
            num_D[g] = np.einsum("n,nij->ij", w, uu)
            den_D[g] = w.sum()
        num_s2[g] = w @ ess
        den_s2[g] = w @ st.n
    if opt.variance_mode == "tied":
        s2 = np.full(G, num_s2.sum() / den_s2.sum())
    else:
        s2 = num_s2 / np.maximum(den_s2, 1e-300)
    s2 = np.maximum(s2, SIGMA2_FLOOR)
    projected = False
    if rv is not None and not opt.re_zero:
        if opt.re_tied:
            D = np.broadcast_to(num_D.sum(axis=0) / den_D.sum(), (G, r, r))
        else:
            D = num_D / np.maximum(den_D, 1e-300)[:, None, None]
        Ds = []
        for g in range(G):
            Dg, bad = _constrain(D[g], opt.re)
            Ds.append(Dg)
            projected |= bad
    else:
        Ds = [np.zeros((r, r)) for _ in range(G)]
    for g, c in enumerate(new):
        c.sigma2 = float(s2[g])
        c.D = Ds[g]
    return props, new, projected


def _init_clusters(st, rv, z, opt: _Options):
    """Parameters from a hard assignment: OLS curves, split residual variance."""
    G = opt.G
    r = 0 if rv is None else rv.idx.size
    clusters = []
    for g in range(G):
        w = z[:, g]
        c = _Cluster(np.zeros(st.XtX.shape[1]), 1.0, np.zeros((r, r)))
        c.beta = _gls_beta(st, None, c, w)
        s2 = max(float(w @ _rss(st, c.beta) / max(w @ st.n, 1.0)), SIGMA2_FLOOR)
        if rv is not None and not opt.re_zero:
            scale = np.einsum("n,nii->i", w, rv.ZtZ) / max(w @ st.n, 1.0)
            c.D = np.diag(0.5 * s2 / np.maximum(scale, 1e-12) / r)
            c.sigma2 = 0.5 * s2
        else:
            c.sigma2 = s2
        clusters.append(c)
    if opt.variance_mode == "tied":
        s2 = float(np.mean([c.sigma2 for c in clusters]))
        for c in clusters:
            c.sigma2 = s2
    if rv is not None and opt.re_tied and not opt.re_zero:
        D = np.mean([c.D for c in clusters], axis=0)
        for c in clusters:
            c.D = D.copy()
    return z.mean(axis=0), clusters


def _random_assignment(rng: np.random.Generator, N: int, G: int) -> np.ndarray:
    labels = rng.integers(0, G, size=N)
    # guarantee every cluster an initial member
    missing = np.setdiff1d(np.arange(G), labels)
    if missing.size:
        slots = rng.choice(N, size=missing.size, replace=False)
        labels[slots] = missing
    z = np.zeros((N, G))
    z[np.arange(N), labels] = 1.0
    return z


@dataclass
class _StartResult:
    props: np.ndarray
    clusters: list
    z: np.ndarray
    trace: list
    converged: bool
    projected: bool


def _run_start(st, rv, opt: _Options, rng) -> Optional[_StartResult]:
    z = _random_assignment(rng, st.N, opt.G)
    props, clusters = _init_clusters(st, rv, z, opt)
    trace = []
    converged = projected = False
    min_mass = DEGENERATE_FRACTION * st.N
    for it in range(opt.max_iter):
        ll, z = _estep(st, rv, props, clusters)
        if not np.isfinite(ll):
            return None
        trace.append(ll)
        if z.sum(axis=0).min() < min_mass:
            return None
        if it > 0 and abs(ll - trace[-2]) < opt.tol * abs(trace[-2]):
            converged = True
            break
        props, clusters, bad = _mstep(st, rv, z, clusters, opt)
        projected |= bad
    if not converged:
        # report loglik and posterior at the final parameters
        ll, z = _estep(st, rv, props, clusters)
        if not np.isfinite(ll) or z.sum(axis=0).min() < min_mass:
            return None
        trace.append(ll)
    return _StartResult(props, clusters, z, trace, converged, projected)


def _start_rng(seed: int, start: int, attempt: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(start, attempt))))


MAX_RESTARTS = 10


def _fit(dataset: Dataset, basis: Basis, opt: _Options, n_starts: int, seed: int, method: str):
    if opt.G < 1:
        raise FitError("G must be >= 1")
    if n_starts < 1:
        raise FitError("n_starts must be >= 1")
    if len(dataset) < opt.G:
        raise FitError(f"G={opt.G} exceeds the number of subjects ({len(dataset)})")
    basis = basis.fitted(np.concatenate([tr.times for tr in dataset]))
    if dataset.n_obs <= opt.G * (basis.q + 1):
        raise FitError(
            f"{dataset.n_obs} observations are too few for G={opt.G} clusters of {basis.q} coefficients"
        )
    # fit on subjects in id-sorted order so results do not depend on input order
    order = np.argsort(np.array(dataset.subject_ids, dtype=object), kind="stable")
    st = _dataset_stats(Dataset(tuple(dataset[i] for i in order), dataset.time_unit), basis)
    rv = None if opt.re_idx is None else _REView(st, opt.re_idx)

    best: Optional[_StartResult] = None
    degenerate = 0
    for start in range(n_starts):
        result = None
        for attempt in range(MAX_RESTARTS):
            result = _run_start(st, rv, opt, _start_rng(seed, start, attempt))
            if result is not None:
                break
            degenerate += 1
        # ties keep the lowest start index
        if result is not None and (best is None or result.trace[-1] > best.trace[-1]):
            best = result
    if best is None:
        raise FitError(f"all {n_starts} starts produced degenerate clusters for G={opt.G}")

    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    z = best.z[inverse]
    lo, hi = dataset.time_range()
    mid = basis_matrix([(lo + hi) / 2.0], basis)[0]
    beta = np.array([c.beta for c in best.clusters])
    rank = np.argsort(-(beta @ mid), kind="stable")
    flags = []
    if degenerate:
        flags.append(f"degenerate_restarts={degenerate}")
    if not best.converged:
        flags.append("not_converged")
    if best.projected:
        flags.append("re_cov_projected")
    trace = np.asarray(best.trace)
    if trace.size > 1 and np.any(np.diff(trace) < -1e-8 * np.abs(trace[:-1])):
        flags.append("loglik_decrease")
        log.warning("log-likelihood decreased during EM (G=%d)", opt.G)
    r = 0 if rv is None else rv.idx.size
    model = MixtureModel(
        method=method,
        basis=basis,
        proportions=best.props[rank].copy(),
        coefficients=beta[rank],
        sigma2=np.array([best.clusters[g].sigma2 for g in rank]),
        re=opt.re,
        re_cov=np.array([best.clusters[g].D for g in rank]).reshape(opt.G, r, r),
        variance_mode=opt.variance_mode,
        re_tied=opt.re_tied,
        loglik=float(trace[-1]),
        n_obs=dataset.n_obs,
        n_subjects=len(dataset),
        time_range=(lo, hi),
        converged=best.converged,
        n_iter=int(trace.size),
        loglik_trace=trace.tolist(),
        flags=flags,
    )
    return model, PosteriorMatrix(z[:, rank])


def gbtm_fit(
    dataset: Dataset,
    basis: Basis = Basis(),
    G: int = 1,
    n_starts: int = 20,
    seed: int = 0,
    variance_mode: str = "per-cluster",
    max_iter: int = 500,
    tol: float = 1e-8,
) -> tuple[MixtureModel, PosteriorMatrix]:
    """Fit a group-based trajectory model by EM; best of ``n_starts``.

    Parameters
    ----------
    dataset : Dataset
        Trajectories; times may differ between subjects.
    basis : Basis
        Polynomial or cubic B-spline basis of the cluster curves.
    G : int
        Number of clusters.
    n_starts : int
        Random hard-assignment starts; the highest log-likelihood wins.
    seed : int
        Master seed; start ``k`` uses its own substream.
    variance_mode : {"per-cluster", "tied"}
        Residual variance per cluster or shared.

    Returns
    -------
    (MixtureModel, PosteriorMatrix)
        Model in canonical cluster order and the matching posterior rows in
        the input subject order.

    Raises
    ------
    FitError
        Too few subjects or observations, or every start degenerated.
    """
    _check_mode(variance_mode)
    opt = _Options(G, "none", None, variance_mode, False, False, max_iter, tol)
    return _fit(dataset, basis, opt, n_starts, seed, "gbtm")


def gmm_fit(
    dataset: Dataset,
    basis: Basis = Basis(),
    re: str = "intercept",
    G: int = 1,
    n_starts: int = 20,
    seed: int = 0,
    variance_mode: str = "per-cluster",
    re_tied: bool = False,
    re_zero: bool = False,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> tuple[MixtureModel, PosteriorMatrix]:
    """Fit a growth mixture model (GBTM plus normal random effects).

    ``re`` selects the random effects: ``"intercept"``, ``"basis"`` (every
    basis column, diagonal covariance) or ``"basis-full"`` (unstructured
    covariance). ``re_tied`` shares the random-effect covariance across
    clusters and ``variance_mode="tied"`` shares the residual variance.
    ``re_zero`` pins the random-effect covariance at zero, which reduces the
    model to a GBTM. Other parameters as in :func:`gbtm_fit`.
    """
    _check_mode(variance_mode)
    if re not in RE_SPECS[1:]:
        raise TrajclusterError(f"unknown random-effect spec {re!r}; use intercept, basis or basis-full")
    idx = np.array([0]) if re == "intercept" else np.arange(basis.q)
    opt = _Options(G, re, idx, variance_mode, re_tied, re_zero, max_iter, tol)
    return _fit(dataset, basis, opt, n_starts, seed, "gmm")


def _check_mode(mode):
    if mode not in ("per-cluster", "tied"):
        raise TrajclusterError(f"unknown variance mode {mode!r}; use per-cluster or tied")


# ------------------------------------------------------------------ prediction


def _log_densities(model: MixtureModel, st: _Stats) -> np.ndarray:
    clusters = [_Cluster(model.coefficients[g], float(model.sigma2[g]), model.re_cov[g])
                for g in range(model.G)]
    if model.re == "none":
        return _logdens(st, None, clusters)
    idx = np.array([0]) if model.re == "intercept" else np.arange(model.basis.q)
    return _logdens(st, _REView(st, idx), clusters)


def _normalize_log(lp: np.ndarray) -> np.ndarray:
    m = lp.max(axis=-1, keepdims=True)
    z = np.exp(lp - m)
    return z / z.sum(axis=-1, keepdims=True)


def posterior(model: MixtureModel, trajectory: Union[Trajectory, tuple, None]) -> np.ndarray:
    """Membership probabilities of one (possibly partial) trajectory.

    ``trajectory`` is a :class:`Trajectory` or a ``(times, values)`` pair;
    an empty pair or None returns the mixing proportions. Computed in log
    space, so extreme observations do not overflow.
    """
    if trajectory is None:
        return model.proportions.copy()
    if isinstance(trajectory, Trajectory):
        t, y = trajectory.times, trajectory.values
    else:
        t, y = (np.asarray(a, dtype=float).ravel() for a in trajectory)
    if t.size == 0:
        return model.proportions.copy()
    X = basis_matrix(t, model.basis)
    st = _stats_from_arrays(np.zeros(t.size, dtype=np.intp), X, y, 1)
    lp = _log_densities(model, st)[0] + np.log(model.proportions)
    return _normalize_log(lp)


def posterior_matrix(model: MixtureModel, dataset: Dataset) -> PosteriorMatrix:
    st = _dataset_stats(dataset, model.basis)
    lp = _log_densities(model, st) + np.log(model.proportions)[None, :]
    return PosteriorMatrix(_normalize_log(lp))


def cluster_means(model: MixtureModel, times) -> np.ndarray:
    """Cluster mean curves, shape ``(G, len(times))``; random effects average to zero."""
    return model.coefficients @ basis_matrix(times, model.basis).T


def marginal_mean(model: MixtureModel, times) -> np.ndarray:
    """Population mean curve: proportion-weighted average of the cluster curves."""
    return model.proportions @ cluster_means(model, times)


def sample(model: MixtureModel, times, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` trajectories on a common grid; returns ``(labels, values)``."""
    X = basis_matrix(times, model.basis)
    labels = rng.choice(model.G, size=n, p=model.proportions)
    y = (model.coefficients @ X.T)[labels]
    if model.r:
        Z = X[:, : model.r]
        L = np.array([_psd_factor(D) for D in model.re_cov])
        u = np.einsum("nij,nj->ni", L[labels], rng.standard_normal((n, model.r)))
        y = y + u @ Z.T
    return labels, y + rng.standard_normal(y.shape) * np.sqrt(model.sigma2[labels])[:, None]


def model_from_parameters(
    basis: Basis,
    proportions: Sequence[float],
    coefficients,
    sigma2,
    re: str = "none",
    re_cov=None,
) -> MixtureModel:
    """Assemble a model from known parameters (simulation and prediction)."""
    props = np.asarray(proportions, dtype=float)
    G = props.size
    r = _re_size(re, basis.q)
    cov = np.zeros((G, r, r)) if re_cov is None else np.asarray(re_cov, dtype=float).reshape(G, r, r)
    return MixtureModel(
        method="gbtm" if re == "none" else "gmm",
        basis=basis,
        proportions=props,
        coefficients=np.asarray(coefficients, dtype=float).reshape(G, -1),
        sigma2=np.broadcast_to(np.asarray(sigma2, dtype=float), (G,)).copy(),
        re=re,
        re_cov=cov,
    )

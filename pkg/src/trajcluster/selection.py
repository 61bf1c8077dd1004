"""Model-selection scores and the cluster-count sweep driver."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import PosteriorMatrix, TrajclusterError

__all__ = [
    "bic",
    "posterior_entropy",
    "elbow",
    "NO_ELBOW",
    "FitRow",
    "FitReport",
    "sweep",
    "choose",
    "write_curves",
    "CHOOSERS",
]

log = logging.getLogger(__name__)

NO_ELBOW = None


def bic(loglik: float, n_params: int, n_obs: int) -> float:
    """Bayesian information criterion ``p ln(n) - 2 loglik`` (lower is better)."""
    if n_obs < 1:
        raise TrajclusterError("n_obs must be >= 1")
    if n_params < 0:
        raise TrajclusterError("n_params must be >= 0")
    return n_params * math.log(n_obs) - 2.0 * loglik


def posterior_entropy(posterior: PosteriorMatrix | np.ndarray) -> float:
    """Mean posterior entropy per subject; 0 means every subject is assigned with certainty."""
    z = posterior.probs if isinstance(posterior, PosteriorMatrix) else np.asarray(posterior, dtype=float)
    safe = np.where(z > 0, z, 1.0)
    return float(-np.sum(z * np.log(safe)) / z.shape[0])


def elbow(scores: Mapping[int, float] | Sequence[float], threshold: float = 0.05, g_min: int = 1) -> Optional[int]:
    """Pick the cluster count where the improvement of a lower-is-better score levels off.

    ``scores`` maps consecutive cluster counts to scores, or is a sequence
    whose first entry belongs to ``g_min``. Returns the smallest ``G`` whose
    improvement over ``G - 1`` falls below ``threshold`` times the total
    improvement from the first to the last count, or :data:`NO_ELBOW`
    (None) if no such ``G`` exists.
    """
    if isinstance(scores, Mapping):
        gs = sorted(scores)
        vals = np.array([scores[g] for g in gs], dtype=float)
        if gs != list(range(gs[0], gs[0] + len(gs))):
            raise TrajclusterError("elbow needs scores for consecutive cluster counts")
    else:
        vals = np.asarray(scores, dtype=float)
        gs = list(range(g_min, g_min + vals.size))
    if vals.size < 3:
        raise TrajclusterError("elbow needs at least 3 scores")
    cut = threshold * (vals[0] - vals[-1])
    for k in range(1, vals.size):
        if vals[k - 1] - vals[k] < cut:
            return gs[k]
    return NO_ELBOW


# ----------------------------------------------------------------------- sweep

CHOOSERS = ("bic-min", "asw-max", "elbow")
NEAR_EMPTY_FRACTION = 0.01

REPORT_COLUMNS = ("G", "status", "loglik", "n_params", "bic", "asw", "entropy", "min_size",
                  "near_empty", "flags", "wall_time")


@dataclass
class FitRow:
    """Scores of one cluster count; ``None`` where undefined or the fit failed."""

    G: int
    status: str = "ok"
    loglik: Optional[float] = None
    n_params: Optional[int] = None
    bic: Optional[float] = None
    asw: Optional[float] = None
    entropy: Optional[float] = None
    min_size: Optional[int] = None
    near_empty: Optional[int] = None
    flags: list = field(default_factory=list)
    wall_time: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class FitReport:
    method: str
    rows: list
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    chooser: Optional[str] = None
    chosen_G: Optional[int] = None
    outcomes: dict = field(default_factory=dict, repr=False)

    def row(self, G: int) -> FitRow:
        for r in self.rows:
            if r.G == G:
                return r
        raise KeyError(G)

    def scores(self, name: str) -> dict:
        """``{G: score}`` over successful rows where the score is defined."""
        return {r.G: getattr(r, name) for r in self.rows if r.ok and getattr(r, name) is not None}

    def to_csv(self, dest, wall_time: bool = False) -> None:
        """Write one line per G. Wall time is left out by default so the
        file is byte-identical across runs with the same seed."""
        cols = [c for c in REPORT_COLUMNS if wall_time or c != "wall_time"]
        close = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
        fh = open(dest, "w", encoding="utf-8", newline="") if close else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method",) + tuple(cols))
            for r in self.rows:
                d = asdict(r)
                d["flags"] = ";".join(r.flags)
                w.writerow((self.method,) + tuple(_fmt(d[c]) for c in cols))
        finally:
            if close:
                fh.close()

    def to_dict(self, wall_time: bool = False) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            if not wall_time:
                d.pop("wall_time")
            rows.append(d)
        return {"method": self.method, "seed": self.seed, "config": self.config, "chooser": self.chooser,
                "chosen_G": self.chosen_G, "rows": rows}

    def to_json(self, wall_time: bool = False) -> str:
        return json.dumps(self.to_dict(wall_time), indent=2) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def choose(report: FitReport, chooser: str, threshold: float = 0.05) -> Optional[int]:
    """Apply a chooser to a report: ``bic-min`` (ties to the smallest G),
    ``asw-max`` (ties to the smallest G) or ``elbow`` on BIC."""
    if chooser not in CHOOSERS:
        raise TrajclusterError(f"unknown chooser {chooser!r}; choose from {', '.join(CHOOSERS)}")
    name = "asw" if chooser == "asw-max" else "bic"
    s = report.scores(name)
    if not s:
        raise TrajclusterError(f"chooser {chooser} needs {name.upper()} scores, which {report.method} lacks")
    if chooser == "bic-min":
        return min(sorted(s), key=lambda g: s[g])
    if chooser == "asw-max":
        return max(sorted(s), key=lambda g: (s[g], -g))
    return elbow(s, threshold)


def _score(prep, out, bic_n: str, near_empty_fraction: float) -> FitRow:
    N = len(out.partition)
    sizes = out.partition.sizes()
    mass = out.posterior.probs.sum(axis=0) if out.posterior is not None else sizes.astype(float)
    row = FitRow(
        G=out.G,
        loglik=out.loglik,
        n_params=out.n_params,
        bic=out.bic(bic_n),
        entropy=posterior_entropy(out.posterior) if out.posterior is not None else None,
        min_size=int(sizes.min()),
        near_empty=int(np.count_nonzero(mass < near_empty_fraction * N)),
        flags=list(out.flags),
    )
    D = prep.silhouette_distances()
    if D is not None and out.G >= 2 and np.all(sizes > 0):
        from .distance import average_silhouette_width

        row.asw = average_silhouette_width(D, out.partition)
    return row


def _fit_one(prep, G: int, seed: int, bic_n: str, near_empty_fraction: float):
    from .methods import fit

    t0 = time.perf_counter()
    try:
        out = fit(prep, G, _g_seed(seed, G))
        row = _score(prep, out, bic_n, near_empty_fraction)
    except TrajclusterError as e:
        log.warning("G=%d failed: %s", G, e)
        out, row = None, FitRow(G=G, status=f"failed: {e}")
    row.wall_time = time.perf_counter() - t0
    return row, out


def _g_seed(seed: int, G: int) -> int:
    # independent per-G substream, reproducible whatever the set of G values
    return int(np.random.SeedSequence(seed, spawn_key=(G,)).generate_state(1, np.uint32)[0])


def sweep(
    dataset,
    config,
    g_min: int = 1,
    g_max: int = 8,
    seed: int = 0,
    chooser: Optional[str] = None,
    threads: int = 1,
    near_empty_fraction: float = NEAR_EMPTY_FRACTION,
    attempts=None,
) -> FitReport:
    """Fit ``config.method`` for every ``G`` in ``g_min..g_max``.

    Each ``G`` gets its own seed derived from ``seed``, so rows do not depend
    on the range swept or on the number of worker threads. A failed fit is
    recorded in its row's ``status`` and the sweep continues; if every fit
    fails a :class:`TrajclusterError` is raised. No ``G`` is chosen unless
    ``chooser`` is given. ``attempts`` is handed to feature extraction
    (see :func:`trajcluster.features.extract_features`).
    """
    from .methods import Prepared

    if not 1 <= g_min <= g_max:
        raise TrajclusterError("need 1 <= g_min <= g_max")
    if config.method in ("ahc", "kmedoids", "features") and g_min < 2:
        raise TrajclusterError(f"{config.method} is scored by ASW, which needs G >= 2")
    prep = Prepared(dataset, config, attempts)
    gs = list(range(g_min, g_max + 1))
    run = lambda G: _fit_one(prep, G, seed, config.bic_n, near_empty_fraction)  # noqa: E731
    if config.method in ("ahc", "kmedoids", "features"):
        # cached inputs are built once up front so worker threads share them
        prep.silhouette_distances()
    if threads > 1 and len(gs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, gs))
    else:
        results = [run(G) for G in gs]
    rows = [r for r, _ in results]
    if not any(r.ok for r in rows):
        raise TrajclusterError(f"all fits failed; first error: {rows[0].status}")
    report = FitReport(config.method, rows, config.to_dict(), seed,
                       outcomes={r.G: o for r, o in results if o is not None})
    if chooser is not None:
        report.chooser = chooser
        report.chosen_G = choose(report, chooser)
    return report


def write_curves(report: FitReport, dataset, dest) -> None:
    """Cluster mean curves of every successful row as long CSV ``G,cluster,time,value``."""
    from .methods import MethodConfig, Prepared, curves

    prep = Prepared(dataset, MethodConfig.from_dict(report.config))
    close = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", encoding="utf-8", newline="") if close else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("G", "cluster", "time", "value"))
        for G in sorted(report.outcomes):
            times, means = curves(prep, report.outcomes[G])
            for g in range(means.shape[0]):
                for t, v in zip(times.tolist(), means[g].tolist()):
                    w.writerow((G, g + 1, repr(t), "" if math.isnan(v) else repr(v)))
    finally:
        if close:
            fh.close()

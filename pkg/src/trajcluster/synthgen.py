"""Synthetic PAP-adherence trajectories.

Each patient is drawn from one of seven adherence groups, receives a
random intercept and slope around the group's quadratic curve, a personal
residual variance, an optional dropout day, and then daily hours of use are
simulated as independent attempt/no-attempt days. The daily series can be
averaged into 14-day blocks to obtain the 26-point biweekly data set.

Randomness
----------
A single master ``seed`` drives everything. Patient ``i`` draws from its own
``PCG64`` stream seeded with ``SeedSequence(seed, spawn_key=(i,))``, so the
patient's data does not depend on how many other patients are generated or in
which order. Within a patient the draws happen in a fixed order: cluster
(one uniform), intercept deviation, slope deviation, residual variance,
dropout day (only for groups with dropout), ``n_days`` attempt uniforms,
then ``n_days`` standard normals for the residual noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, Partition, TrajclusterError, Trajectory

__all__ = [
    "ClusterSpec",
    "GeneratorConfig",
    "ConfigError",
    "default_specs",
    "generate",
    "downsample",
    "generate_biweekly",
    "SIGMA2_FLOOR",
]

SIGMA2_FLOOR = 0.25
MAX_HOURS = 24.0


class ConfigError(TrajclusterError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    """Generating parameters for one adherence group.

    ``beta1`` is in hours/day x 1e-2 and ``beta2`` in hours/day^2 x 1e-4,
    i.e. the scale used in the published table; :meth:`curve` applies the
    scaling. ``dropout`` is ``(mean_day, sd_day)`` or None.
    """

    name: str
    proportion: float
    beta0: float
    beta0_sd: float
    beta1: float
    beta1_sd: float
    beta2: float
    sigma2: float
    sigma2_sd: float
    p_attempt: float
    dropout: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not self.proportion > 0:
            raise ConfigError(f"{self.name}: proportion must be > 0")
        if not 0.0 <= self.p_attempt <= 1.0:
            raise ConfigError(f"{self.name}: p_attempt must lie in [0, 1]")
        if min(self.beta0_sd, self.beta1_sd, self.sigma2_sd) < 0:
            raise ConfigError(f"{self.name}: standard deviations must be >= 0")
        if not self.sigma2 > 0:
            raise ConfigError(f"{self.name}: sigma2 must be > 0")
        if self.dropout is not None and self.dropout[1] < 0:
            raise ConfigError(f"{self.name}: dropout sd must be >= 0")

    def curve(self, days) -> np.ndarray:
        """Group mean curve (before attempts, dropout and clamping)."""
        d = np.asarray(days, dtype=float)
        return self.beta0 + self.beta1 * 1e-2 * d + self.beta2 * 1e-4 * d**2


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 500
    n_days: int = 361
    block_days: int = 14
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.n_days < 1:
            raise ConfigError("n_days must be >= 1")
        if self.block_days < 1:
            raise ConfigError("block_days must be >= 1")


def default_specs() -> list[ClusterSpec]:
    """The seven adherence groups with their published coefficients."""
    return [
        ClusterSpec("Good users", 0.24, 6.6, 0.54, 0.0, 0.16, 0.0, 2.0, 0.82, 0.97),
        ClusterSpec("Slow improvers", 0.13, 4.8, 1.0, 1.7, 0.16, -0.30, 3.6, 1.3, 0.94),
        ClusterSpec("Slow decliners", 0.14, 6.1, 0.63, -1.9, 0.14, 0.30, 3.2, 0.85, 0.77),
        ClusterSpec("Variable users", 0.17, 4.4, 0.87, 0.96, 0.0, -0.30, 3.4, 1.2, 0.82),
        ClusterSpec("Occasional attempters", 0.08, 3.2, 1.1, -0.30, 0.91, 0.0, 3.6, 1.8, 0.29),
        ClusterSpec("Early drop-outs", 0.13, 4.0, 1.1, -0.14, 1.0, -1.0, 5.0, 2.6, 0.69, (80.0, 30.0)),
        ClusterSpec("Non-users", 0.11, 2.5, 0.93, -1.5, 1.0, -1.0, 3.0, 1.7, 0.70, (20.0, 10.0)),
    ]


def _patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def _simulate_patient(rng: np.random.Generator, specs: Sequence[ClusterSpec], cum: np.ndarray, days: np.ndarray):
    g = int(np.searchsorted(cum, rng.random(), side="right"))
    g = min(g, len(specs) - 1)
    s = specs[g]
    b0 = s.beta0 + s.beta0_sd * rng.standard_normal()
    b1 = (s.beta1 + s.beta1_sd * rng.standard_normal()) * 1e-2
    b2 = s.beta2 * 1e-4
    sigma2 = max(s.sigma2 + s.sigma2_sd * rng.standard_normal(), SIGMA2_FLOOR)
    if s.dropout is not None:
        dropout_day = max(s.dropout[0] + s.dropout[1] * rng.standard_normal(), 1.0)
    else:
        dropout_day = np.inf
    attempted = rng.random(days.size) < s.p_attempt
    noise = rng.standard_normal(days.size) * np.sqrt(sigma2)
    values = np.clip(b0 + b1 * days + b2 * days**2 + noise, 0.0, MAX_HOURS)
    values[~attempted] = 0.0
    values[days > dropout_day] = 0.0
    return g, values


def generate(config: GeneratorConfig, specs: Optional[Sequence[ClusterSpec]] = None) -> tuple[Dataset, Partition]:
    """Simulate daily hours of use for ``config.n_patients`` patients.

    Returns the daily data set (times are days ``1..n_days``) and the true
    group membership (label ``g`` is ``specs[g - 1]``).
    """
    specs = list(default_specs() if specs is None else specs)
    if not specs:
        raise ConfigError("at least one cluster spec is required")
    props = np.array([s.proportion for s in specs])
    if abs(props.sum() - 1.0) > 1e-6:
        raise ConfigError(f"cluster proportions sum to {props.sum():.6g}, expected 1")
    cum = np.cumsum(props)
    days = np.arange(1, config.n_days + 1, dtype=float)
    width = len(str(config.n_patients))
    trajectories = []
    labels = np.empty(config.n_patients, dtype=np.int64)
    for i in range(config.n_patients):
        g, values = _simulate_patient(_patient_rng(config.seed, i), specs, cum, days)
        labels[i] = g + 1
        trajectories.append(Trajectory(f"P{i + 1:0{width}d}", days, values))
    return Dataset(tuple(trajectories), time_unit="raw-days"), Partition(labels, len(specs))


def downsample(
    daily: Dataset,
    block_days: int = 14,
    timestamp: str = "start",
    normalize: bool = True,
) -> Dataset:
    """Average daily values over consecutive ``block_days``-day blocks.

    Block ``k`` covers days ``(k-1)*block_days + 1 .. k*block_days``; a final
    partial block averages the days that exist. Days are taken relative to
    each subject's first time point. The block's timestamp is its first day
    (``timestamp="start"``) or its midpoint (``"midpoint"``). With
    ``normalize`` the block timestamps are mapped linearly onto ``[0, 1]``
    (first block -> 0, last block -> 1), which for 361 days and 14-day blocks
    is the ``[1, 351] -> [0, 1]`` scaling.
    """
    if len(daily) == 0:
        raise TrajclusterError("cannot downsample an empty dataset")
    if block_days < 1:
        raise ConfigError("block_days must be >= 1")
    if timestamp not in ("start", "midpoint"):
        raise ConfigError(f"unknown timestamp convention {timestamp!r}")
    out = []
    for tr in daily:
        day = np.rint(tr.times - tr.times[0]).astype(np.int64)
        block = day // block_days
        n_blocks = int(block[-1]) + 1
        sums = np.bincount(block, weights=tr.values, minlength=n_blocks)
        counts = np.bincount(block, minlength=n_blocks)
        keep = counts > 0
        means = sums[keep] / counts[keep]
        first = tr.times[0] + np.arange(n_blocks)[keep] * block_days
        if timestamp == "start":
            stamps = first
        else:
            last = np.minimum(first + block_days - 1, tr.times[-1])
            stamps = (first + last) / 2.0
        out.append((tr.subject_id, stamps, means))
    if normalize:
        lo = min(s[1][0] for s in out)
        hi = max(s[1][-1] for s in out)
        span = hi - lo if hi > lo else 1.0
        out = [(sid, (t - lo) / span, y) for sid, t, y in out]
    return Dataset(
        tuple(Trajectory(sid, t, y) for sid, t, y in out),
        time_unit="normalized" if normalize else daily.time_unit,
    )


def generate_biweekly(config: GeneratorConfig = GeneratorConfig(), specs=None, **kwargs) -> tuple[Dataset, Partition]:
    """Generate daily data and return its normalized block-averaged version."""
    daily, truth = generate(config, specs)
    return downsample(daily, config.block_days, **kwargs), truth

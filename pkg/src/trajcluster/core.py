"""Trajectory data model, CSV ingestion, alignment and partition utilities."""

from __future__ import annotations

import csv
import io
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Sequence, Union

import numpy as np

__all__ = [
    "TrajclusterError",
    "ParseError",
    "ValidationError",
    "AlignmentError",
    "Trajectory",
    "Dataset",
    "AlignedMatrix",
    "Partition",
    "PosteriorMatrix",
    "load_trajectories",
    "write_trajectories",
    "align",
    "hard_assign",
    "adjusted_rand_index",
    "one_hot",
    "partition_means",
]

CSV_HEADER = ("subject_id", "time", "value")


class TrajclusterError(ValueError):
    """Base class for all errors raised by this package."""


class ParseError(TrajclusterError):
    pass


class ValidationError(TrajclusterError):
    pass


class AlignmentError(TrajclusterError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    """One subject's ordered observations.

    ``times`` must be strictly increasing and ``values`` finite.
    """

    subject_id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = _frozen(self.times)
        y = _frozen(self.values)
        if t.ndim != 1 or y.ndim != 1:
            raise ValidationError(f"subject {self.subject_id!r}: times and values must be 1-D")
        if t.size != y.size:
            raise ValidationError(
                f"subject {self.subject_id!r}: {t.size} times but {y.size} values"
            )
        if t.size < 1:
            raise ValidationError(f"subject {self.subject_id!r}: no observations")
        if not np.all(np.isfinite(t)):
            raise ValidationError(f"subject {self.subject_id!r}: non-finite time")
        if not np.all(np.isfinite(y)):
            raise ValidationError(f"subject {self.subject_id!r}: non-finite value")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError(f"subject {self.subject_id!r}: times not strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    def __len__(self) -> int:
        return self.times.size

    def subset(self, mask) -> "Trajectory":
        """Restrict to the observations selected by ``mask`` (must keep at least one)."""
        return Trajectory(self.subject_id, self.times[mask], self.values[mask])


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    time_unit: str = "raw-days"

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise ValidationError("dataset is empty")
        seen = set()
        for tr in trajs:
            if tr.subject_id in seen:
                raise ValidationError(f"duplicate subject_id {tr.subject_id!r}")
            seen.add(tr.subject_id)
        if self.time_unit not in ("raw-days", "normalized"):
            raise ValidationError(f"unknown time_unit {self.time_unit!r}")
        object.__setattr__(self, "trajectories", trajs)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def subject_ids(self) -> list[str]:
        return [tr.subject_id for tr in self.trajectories]

    @property
    def n_obs(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def time_range(self) -> tuple[float, float]:
        lo = min(float(tr.times[0]) for tr in self.trajectories)
        hi = max(float(tr.times[-1]) for tr in self.trajectories)
        return lo, hi

    def to_long(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(subject_index, times, values)`` as flat arrays."""
        idx = np.concatenate(
            [np.full(len(tr), i, dtype=np.intp) for i, tr in enumerate(self.trajectories)]
        )
        t = np.concatenate([tr.times for tr in self.trajectories])
        y = np.concatenate([tr.values for tr in self.trajectories])
        return idx, t, y


@dataclass(frozen=True)
class AlignedMatrix:
    subject_ids: tuple[str, ...]
    grid: np.ndarray
    matrix: np.ndarray

    def __post_init__(self):
        grid = _frozen(self.grid)
        mat = _frozen(self.matrix)
        if mat.ndim != 2 or mat.shape != (len(self.subject_ids), grid.size):
            raise ValidationError(
                f"matrix shape {mat.shape} does not match "
                f"{len(self.subject_ids)} subjects x {grid.size} grid points"
            )
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise ValidationError("grid not strictly increasing")
        if not np.all(np.isfinite(mat)):
            raise ValidationError("aligned matrix contains non-finite entries")
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "matrix", mat)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True)
class Partition:
    """Hard cluster assignment with labels in ``1..G``."""

    labels: np.ndarray
    G: int

    def __post_init__(self):
        labels = _frozen(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValidationError("labels must be 1-D")
        if self.G < 1:
            raise ValidationError("G must be >= 1")
        if labels.size and (labels.min() < 1 or labels.max() > self.G):
            raise ValidationError(f"labels must lie in 1..{self.G}")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels - 1, minlength=self.G)

    @classmethod
    def from_zero_based(cls, labels, G: int | None = None) -> "Partition":
        labels = np.asarray(labels, dtype=np.int64)
        if G is None:
            G = int(labels.max()) + 1 if labels.size else 1
        return cls(labels + 1, G)


@dataclass(frozen=True)
class PosteriorMatrix:
    """Soft assignment: rows are subjects, columns clusters, rows sum to one."""

    probs: np.ndarray
    atol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        z = _frozen(self.probs)
        if z.ndim != 2 or z.shape[1] < 1:
            raise ValidationError("posterior must be an N x G matrix")
        if np.any(z < 0) or np.any(z > 1) or not np.all(np.isfinite(z)):
            raise ValidationError("posterior entries must lie in [0, 1]")
        if z.shape[0] and np.max(np.abs(z.sum(axis=1) - 1.0)) > self.atol:
            raise ValidationError("posterior rows must sum to 1")
        object.__setattr__(self, "probs", z)

    @property
    def G(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.probs.shape[0]


# --------------------------------------------------------------------------- CSV


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def load_trajectories(
    csv_source: Union[str, os.PathLike, IO[str]], time_unit: str = "raw-days"
) -> Dataset:
    """Read a long-format ``subject_id,time,value`` CSV into a :class:`Dataset`.

    Rows may appear in any order. Subjects keep the order of their first
    appearance; observations within a subject are sorted by time.

    Raises
    ------
    ParseError
        Missing/incorrect header or a malformed row (the message carries the
        1-based line number).
    ValidationError
        Duplicate ``(subject, time)`` pairs or non-finite values.
    """
    fh, close = _open_text(csv_source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("line 1: empty file, header required") from None
        header = [h.strip() for h in header]
        if header and header[0].startswith("﻿"):
            header[0] = header[0][1:]
        if tuple(header) != CSV_HEADER:
            raise ParseError(f"line 1: expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}")
        rows: dict[str, list[tuple[float, float]]] = defaultdict(list)
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}")
            sid = row[0].strip()
            if not sid:
                raise ParseError(f"line {lineno}: empty subject_id")
            try:
                t = float(row[1])
                y = float(row[2])
            except ValueError:
                raise ParseError(f"line {lineno}: cannot parse number in {row!r}") from None
            if not math.isfinite(t):
                raise ValidationError(f"line {lineno}: non-finite time for subject {sid!r}")
            if not math.isfinite(y):
                raise ValidationError(f"line {lineno}: non-finite value for subject {sid!r}")
            rows[sid].append((t, y))
    finally:
        if close:
            fh.close()
    if not rows:
        raise ValidationError("no observations in input")
    trajectories = []
    for sid, obs in rows.items():
        obs.sort(key=lambda p: p[0])
        times = np.array([p[0] for p in obs])
        dup = np.flatnonzero(np.diff(times) == 0)
        if dup.size:
            raise ValidationError(
                f"duplicate time {times[dup[0]]!r} for subject {sid!r}"
            )
        trajectories.append(Trajectory(sid, times, np.array([p[1] for p in obs])))
    return Dataset(tuple(trajectories), time_unit=time_unit)


def write_trajectories(dataset: Dataset, dest: Union[str, os.PathLike, IO[str], None] = None) -> str | None:
    """Write ``dataset`` as long CSV. Floats use ``repr`` so reloading is exact.

    Returns the CSV text when ``dest`` is None.
    """
    buf = io.StringIO() if dest is None else None
    if dest is None:
        fh, close = buf, False
    elif isinstance(dest, (str, os.PathLike)):
        fh, close = open(dest, "w", encoding="utf-8", newline=""), True
    else:
        fh, close = dest, False
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for tr in dataset:
            for t, y in zip(tr.times.tolist(), tr.values.tolist()):
                w.writerow((tr.subject_id, repr(t), repr(y)))
    finally:
        if close:
            fh.close()
    return buf.getvalue() if buf is not None else None


# --------------------------------------------------------------------- alignment


def align(dataset: Dataset, tolerance: float = 1e-9) -> AlignedMatrix:
    """Stack trajectories observed on a shared time grid into an N x n matrix.

    The grid is taken from the first subject. Every other subject must have
    exactly one observation within ``tolerance`` of each grid time and no
    extra observations.
    """
    grid = dataset[0].times
    offenders = []
    rows = np.empty((len(dataset), grid.size))
    for i, tr in enumerate(dataset):
        if len(tr) != grid.size or np.any(np.abs(tr.times - grid) > tolerance):
            offenders.append(tr.subject_id)
            continue
        rows[i] = tr.values
    if offenders:
        shown = ", ".join(repr(s) for s in offenders[:10])
        more = f" (+{len(offenders) - 10} more)" if len(offenders) > 10 else ""
        raise AlignmentError(
            f"{len(offenders)} subject(s) do not match the {grid.size}-point grid: {shown}{more}"
        )
    return AlignedMatrix(tuple(dataset.subject_ids), grid.copy(), rows)


# -------------------------------------------------------------------- partitions


def hard_assign(posterior: PosteriorMatrix | np.ndarray) -> Partition:
    """Modal assignment; ties go to the lowest cluster index."""
    z = posterior.probs if isinstance(posterior, PosteriorMatrix) else np.asarray(posterior)
    # np.argmax returns the first maximal index
    return Partition(np.argmax(z, axis=1) + 1, z.shape[1])


def one_hot(partition: Partition) -> np.ndarray:
    z = np.zeros((len(partition), partition.G))
    z[np.arange(len(partition)), partition.labels - 1] = 1.0
    return z


def partition_means(dataset: Dataset, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean trajectory of every cluster.

    Returns ``(times, means)`` where ``times`` holds the distinct observation
    times and ``means[g, k]`` averages the values of cluster ``g + 1``
    observed at ``times[k]`` (NaN where no member was observed).
    """
    if len(partition) != len(dataset):
        raise ValidationError("partition and dataset sizes differ")
    idx, t, y = dataset.to_long()
    times, k = np.unique(t, return_inverse=True)
    g = partition.labels[idx] - 1
    total = np.zeros((partition.G, times.size))
    count = np.zeros((partition.G, times.size))
    np.add.at(total, (g, k), y)
    np.add.at(count, (g, k), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return times, np.where(count > 0, total / count, np.nan)


def _labels(p) -> np.ndarray:
    return p.labels if isinstance(p, Partition) else np.asarray(p)


def adjusted_rand_index(a: Partition | Sequence[int], b: Partition | Sequence[int]) -> float:
    """Hubert-Arabie adjusted Rand index between two partitions."""
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValidationError(f"partition lengths differ: {la.size} vs {lb.size}")
    n = la.size
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        x = np.asarray(x, dtype=float)
        return float(np.sum(x * (x - 1) / 2))

    sum_cells = comb2(table)
    sum_a = comb2(table.sum(axis=1))
    sum_b = comb2(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        # both partitions trivial in the same way (all-one or all-singletons)
        return 1.0 if sum_a == sum_b else 0.0
    return (sum_cells - expected) / (max_index - expected)

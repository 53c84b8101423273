"""Entry removal under configurable missingness, and model input triplets.

A complete cohort is degraded by removing entries either independently
with probability tau (the missing threshold) or in a Gaussian-shaped burst
of time indices per stream.  Removed values go into a ground-truth ledger
used only for scoring; the degraded cohort is what models see.  From each
degraded segment the (z, m, delta) triplet is built: zero-filled values,
the observation indicator, and the elapsed minutes since each stream's
last measurement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Cohort, SegmentSeries
from .errors import PreconditionError, RowError, SchemaError

LEDGER_HEADER = "segment_idx,stream_idx,time_idx,true_value"

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class MaskSpec:
    """How to remove entries: mode, its parameters, seed, and scope label.

    ``bernoulli`` drops each entry independently with probability ``tau``;
    ``gaussian`` drops round(L/4) time indices per (segment, stream), drawn
    from a discrete Gaussian over the grid centered at ``center`` with
    standard deviation ``sd`` (duplicates are resampled).
    """

    mode: str = BERNOULLI
    tau: float = 0.2
    center: float | None = None
    sd: float | None = None
    seed: int = 0
    scope: str = "eval-mask"

    def __post_init__(self):
        if self.mode not in (BERNOULLI, GAUSSIAN):
            raise PreconditionError(f"unknown mask mode {self.mode!r}")
        if self.mode == BERNOULLI and not 0.0 <= self.tau <= 1.0:
            raise PreconditionError(f"tau must be in [0, 1], got {self.tau}")
        if self.mode == GAUSSIAN:
            if self.center is None or self.sd is None:
                raise PreconditionError("gaussian mode requires center and sd")
            if not self.sd > 0:
                raise PreconditionError(f"sd must be > 0, got {self.sd}")
        if self.scope not in ("train-mask", "eval-mask"):
            raise PreconditionError(f"scope must be 'train-mask' or 'eval-mask', got {self.scope!r}")


@dataclass(frozen=True)
class MaskedTriplet:
    """Per-segment arrays fed to the estimator: values z, mask m, gaps delta.

    ``z`` holds observed values with zeros at missing coordinates, ``m`` is
    1 where observed and 0 where missing, and ``delta[d][t]`` is the time in
    minutes since stream ``d`` was last measured before ``t`` (0 at t=0).
    """

    z: np.ndarray
    m: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        m = np.asarray(self.m, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        if not (z.shape == m.shape == delta.shape) or z.ndim != 2:
            raise PreconditionError("z, m, delta must share one D x L shape")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class GroundTruthLedger:
    """Removed values keyed by (segment index, stream index, time index)."""

    entries: tuple[tuple[int, int, int, float], ...]

    def __post_init__(self):
        entries = tuple((int(n), int(d), int(t), float(v)) for n, d, t, v in self.entries)
        coords = [(n, d, t) for n, d, t, _ in entries]
        if len(set(coords)) != len(coords):
            raise PreconditionError("ledger contains duplicate coordinates")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def coordinates(self) -> set[tuple[int, int, int]]:
        return {(n, d, t) for n, d, t, _ in self.entries}


def _gaussian_indices(rng: np.random.Generator, length: int, center: float, sd: float, count: int) -> set[int]:
    chosen: set[int] = set()
    while len(chosen) < count:
        idx = int(round(rng.normal(center, sd)))
        if 0 <= idx < length and idx not in chosen:
            chosen.add(idx)
    return chosen


def apply_mask(cohort: Cohort, spec: MaskSpec) -> tuple[Cohort, GroundTruthLedger]:
    """Remove entries from a complete cohort, recording ground truth.

    Removed coordinates get value 0 and observed=False in the returned
    cohort; the ledger records every removed (n, d, t, true value).  The
    input must be fully observed.  Deterministic given ``spec.seed``.
    """
    if not cohort.fully_observed():
        raise PreconditionError("apply_mask requires a fully observed cohort")
    rng = np.random.default_rng(spec.seed)
    length = cohort.length
    members = []
    entries: list[tuple[int, int, int, float]] = []
    for n, series in enumerate(cohort.segments):
        if spec.mode == BERNOULLI:
            missing = rng.random(series.values.shape) < spec.tau
        else:
            count = int(round(length / 4))
            missing = np.zeros(series.values.shape, dtype=bool)
            for d in range(series.n_streams):
                for t in _gaussian_indices(rng, length, float(spec.center), float(spec.sd), count):
                    missing[d, t] = True
        values = series.values.copy()
        for d, t in zip(*np.nonzero(missing)):
            entries.append((n, int(d), int(t), float(values[d, t])))
        values[missing] = 0.0
        members.append(replace(series, values=values, observed=~missing))
    masked = Cohort(segments=tuple(members), stream_names=cohort.stream_names, norm_params=cohort.norm_params)
    return masked, GroundTruthLedger(entries=tuple(entries))


def build_triplet(series: SegmentSeries) -> MaskedTriplet:
    """Build (z, m, delta) for one segment.

    delta accumulates the elapsed minutes while a stream stays unobserved
    and resets after an observation: delta[d][0] = 0 and, for t >= 1,
    delta[d][t] = s[t] - s[t-1] + (delta[d][t-1] if m[d][t-1] == 0 else 0).
    """
    m = series.observed.astype(np.float64)
    z = np.where(series.observed, series.values, 0.0)
    gaps = np.diff(series.timestamps).astype(np.float64)
    delta = np.zeros_like(m)
    for t in range(1, series.length):
        carry = np.where(m[:, t - 1] == 0.0, delta[:, t - 1], 0.0)
        delta[:, t] = gaps[t - 1] + carry
    return MaskedTriplet(z=z, m=m, delta=delta)


def write_ledger_csv(ledger: GroundTruthLedger, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LEDGER_HEADER.split(","))
        for n, d, t, v in ledger.entries:
            writer.writerow([str(n), str(d), str(t), repr(v)])


def read_ledger_csv(path: str | Path) -> GroundTruthLedger:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: no header row") from None
        if header != LEDGER_HEADER.split(","):
            raise SchemaError(f"malformed header: expected {LEDGER_HEADER!r}")
        entries = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                entries.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
            except (ValueError, IndexError):
                raise RowError(line_no, f"cannot parse ledger row {row!r}") from None
    return GroundTruthLedger(entries=tuple(entries))


def normalize_ledger(
    ledger: GroundTruthLedger, norm_params: tuple[tuple[float, float], ...]
) -> GroundTruthLedger:
    """Ledger with true values mapped onto the unit scale of ``norm_params``."""
    entries = tuple(
        (n, d, t, (v - norm_params[d][0]) / (norm_params[d][1] - norm_params[d][0]))
        for n, d, t, v in ledger.entries
    )
    return GroundTruthLedger(entries=entries)

"""Traffic measurement ingestion, cohort selection, synthesis, and scaling.

A *cohort* is a set of road segments aligned on one shared grid of
integer-minute timestamps, each carrying D measurement streams (speed in
km/h and travel time in seconds for the standard traffic case).  All
functions here are pure: they never mutate their inputs and are fully
deterministic given their explicit seed arguments.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import TextIO

import numpy as np

from .errors import (
    DegenerateStreamError,
    EmptyCohortError,
    PreconditionError,
    RowError,
    SchemaError,
)

CSV_HEADER = (
    "segment_id,start_lat,start_lon,end_lat,end_lon,length_km,"
    "timestamp_min,speed_kmh,travel_time_s,confidence_pct"
)
CSV_COLUMNS = CSV_HEADER.split(",")
OBSERVED_COLUMNS = ["speed_observed", "travel_time_observed"]
STREAM_NAMES = ["speed_kmh", "travel_time_s"]

# 2017-09-08 16:30 Toronto (20:30 UTC), in minutes since the epoch.
_SYNTH_START_MIN = int(datetime(2017, 9, 8, 20, 30, tzinfo=timezone.utc).timestamp()) // 60

_FREE_FLOW_KMH = 100.0
_MIN_SPEED_KMH = 5.0


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RoadSegment:
    """One road segment with endpoint coordinates and length in km."""

    id: str
    start: tuple[float, float]
    end: tuple[float, float]
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise PreconditionError(f"segment {self.id!r}: length must be > 0, got {self.length}")
        for name, (lat, lon) in (("start", self.start), ("end", self.end)):
            if not (-90.0 <= lat <= 90.0):
                raise PreconditionError(f"segment {self.id!r}: {name} latitude {lat} outside [-90, 90]")
            if not (-180.0 <= lon <= 180.0):
                raise PreconditionError(f"segment {self.id!r}: {name} longitude {lon} outside [-180, 180]")


@dataclass(frozen=True)
class RawRecord:
    """A single per-minute measurement row for one segment."""

    segment_id: str
    timestamp: int
    speed: float
    travel_time: float
    confidence: float

    def __post_init__(self):
        if not (math.isfinite(self.speed) and self.speed >= 0):
            raise PreconditionError(f"record {self.segment_id!r}@{self.timestamp}: bad speed {self.speed}")
        if not (math.isfinite(self.travel_time) and self.travel_time >= 0):
            raise PreconditionError(
                f"record {self.segment_id!r}@{self.timestamp}: bad travel_time {self.travel_time}"
            )
        if not (0.0 <= self.confidence <= 100.0):
            raise PreconditionError(
                f"record {self.segment_id!r}@{self.timestamp}: confidence {self.confidence} outside [0, 100]"
            )


@dataclass(frozen=True)
class SegmentSeries:
    """One segment's D x L measurement grid with observation flags.

    ``values[d][t]`` is the measurement of stream ``d`` at ``timestamps[t]``;
    ``observed[d][t]`` says whether that entry was actually measured.  Arrays
    are copied and frozen at construction, so instances are safe to share
    across workers.
    """

    segment: RoadSegment
    timestamps: np.ndarray
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        ts = _readonly(np.asarray(self.timestamps, dtype=np.int64))
        vals = _readonly(np.asarray(self.values, dtype=np.float64))
        obs = _readonly(np.asarray(self.observed, dtype=bool))
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "observed", obs)
        if ts.ndim != 1 or ts.size < 1:
            raise PreconditionError("timestamps must be a non-empty 1-D array")
        if np.any(np.diff(ts) <= 0):
            raise PreconditionError(f"segment {self.segment.id!r}: timestamps not strictly ascending")
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] != ts.size:
            raise PreconditionError(
                f"segment {self.segment.id!r}: values must be D x L with L == len(timestamps)"
            )
        if obs.shape != vals.shape:
            raise PreconditionError(f"segment {self.segment.id!r}: observed shape differs from values")
        if not np.all(np.isfinite(vals[obs])):
            raise PreconditionError(f"segment {self.segment.id!r}: non-finite observed value")

    @property
    def n_streams(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Cohort:
    """N segment series on one shared timestamp grid.

    ``norm_params`` is ``None`` for raw-scale cohorts, or a per-stream list
    of ``(min, max)`` pairs after unit-interval scaling.
    """

    segments: tuple[SegmentSeries, ...]
    stream_names: tuple[str, ...]
    norm_params: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "stream_names", tuple(self.stream_names))
        if self.norm_params is not None:
            object.__setattr__(
                self, "norm_params", tuple((float(a), float(b)) for a, b in self.norm_params)
            )
        if len(self.segments) < 1:
            raise PreconditionError("cohort must contain at least one segment")
        first = self.segments[0]
        for s in self.segments[1:]:
            if not np.array_equal(s.timestamps, first.timestamps):
                raise PreconditionError(f"segment {s.segment.id!r} is not on the shared timestamp grid")
            if s.n_streams != first.n_streams:
                raise PreconditionError(f"segment {s.segment.id!r} has a different stream count")
        if len(self.stream_names) != first.n_streams:
            raise PreconditionError("stream_names length must equal the stream count")
        if self.norm_params is not None and len(self.norm_params) != first.n_streams:
            raise PreconditionError("norm_params length must equal the stream count")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_streams(self) -> int:
        return self.segments[0].n_streams

    @property
    def length(self) -> int:
        return self.segments[0].length

    @property
    def timestamps(self) -> np.ndarray:
        return self.segments[0].timestamps

    def values_array(self) -> np.ndarray:
        """Stack all segment values into an (N, D, L) array (a copy)."""
        return np.stack([s.values for s in self.segments]).copy()

    def observed_array(self) -> np.ndarray:
        return np.stack([s.observed for s in self.segments]).copy()

    def fully_observed(self) -> bool:
        return all(bool(np.all(s.observed)) for s in self.segments)


@dataclass
class IngestResult:
    """Parsed rows plus the segment geometry seen in them."""

    records: list[RawRecord]
    segments: list[RoadSegment]
    dropped_low_confidence: int = 0


def _open_source(source: str | Path | TextIO) -> tuple[TextIO, bool]:
    if hasattr(source, "read"):
        return source, False  # type: ignore[return-value]
    return open(source, "r", encoding="utf-8", newline=""), True


def ingest_csv(source: str | Path | TextIO, min_confidence: float) -> IngestResult:
    """Parse measurement rows, keeping those at or above ``min_confidence``.

    Rows below the confidence threshold are dropped and counted in the
    result.  Raises :class:`SchemaError` for an empty file or wrong header
    and :class:`RowError` (with the 1-based line number) for a row that
    fails to parse.
    """
    stream, should_close = _open_source(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: no header row") from None
        if header != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if c not in header]
            if missing:
                raise SchemaError(f"malformed header: missing column {missing[0]!r}")
            raise SchemaError(f"malformed header: expected {CSV_HEADER!r}")

        records: list[RawRecord] = []
        segments: dict[str, RoadSegment] = {}
        dropped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise RowError(line_no, f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            named = dict(zip(CSV_COLUMNS, row))

            def parse_float(col: str) -> float:
                try:
                    return float(named[col])
                except ValueError:
                    raise RowError(line_no, f"cannot parse {col}={named[col]!r} as a number") from None

            def parse_int(col: str) -> int:
                try:
                    return int(named[col])
                except ValueError:
                    raise RowError(line_no, f"cannot parse {col}={named[col]!r} as an integer") from None

            confidence = parse_float("confidence_pct")
            if not (0.0 <= confidence <= 100.0):
                raise RowError(line_no, f"confidence_pct {confidence} outside [0, 100]")
            segment_id = named["segment_id"]
            geometry = RoadSegment(
                id=segment_id,
                start=(parse_float("start_lat"), parse_float("start_lon")),
                end=(parse_float("end_lat"), parse_float("end_lon")),
                length=parse_float("length_km"),
            )
            record = RawRecord(
                segment_id=segment_id,
                timestamp=parse_int("timestamp_min"),
                speed=parse_float("speed_kmh"),
                travel_time=parse_float("travel_time_s"),
                confidence=confidence,
            )
            if confidence < min_confidence:
                dropped += 1
                continue
            known = segments.get(segment_id)
            if known is None:
                segments[segment_id] = geometry
            elif known != geometry:
                raise RowError(line_no, f"segment {segment_id!r} reappears with different geometry")
            records.append(record)
        return IngestResult(records=records, segments=list(segments.values()), dropped_low_confidence=dropped)
    finally:
        if should_close:
            stream.close()


def _runs(sorted_minutes: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of consecutive minutes, as inclusive (start, end) pairs."""
    if sorted_minutes.size == 0:
        return []
    breaks = np.nonzero(np.diff(sorted_minutes) != 1)[0]
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [sorted_minutes.size - 1]))
    return [(int(sorted_minutes[a]), int(sorted_minutes[b])) for a, b in zip(starts, ends)]


def _longest_run(minutes: np.ndarray) -> tuple[int, int] | None:
    """Longest run of consecutive minutes; earliest wins on a tie."""
    best = None
    for start, end in _runs(minutes):
        if best is None or end - start > best[1] - best[0]:
            best = (start, end)
    return best


def select_cohort(
    records: list[RawRecord], segments: list[RoadSegment], min_length: int
) -> Cohort:
    """Pick the largest segment set sharing >= ``min_length`` contiguous mutual minutes.

    The shared grid is the intersection of the chosen segments' timestamp
    sets truncated to its longest contiguous run.  Ties between equal-sized
    sets are broken by longer grid, then by lexicographic segment-id order.
    Raises :class:`EmptyCohortError` when no set qualifies.
    """
    if min_length < 1:
        raise PreconditionError(f"min_length must be >= 1, got {min_length}")
    geometry = {s.id: s for s in segments}
    times: dict[str, set[int]] = {}
    for r in records:
        if r.segment_id not in geometry:
            raise PreconditionError(f"record references unknown segment {r.segment_id!r}")
        times.setdefault(r.segment_id, set()).add(r.timestamp)

    # Each maximal run [s, e] of a segment admits window starts s..e-m+1 for a
    # window of m consecutive minutes; sweep those start intervals to find the
    # largest set of segments covering a common window.
    events: list[tuple[int, int]] = []
    seg_runs: dict[str, list[tuple[int, int]]] = {}
    for seg_id, ts in times.items():
        runs = _runs(np.array(sorted(ts), dtype=np.int64))
        seg_runs[seg_id] = runs
        for start, end in runs:
            last_start = end - min_length + 1
            if last_start >= start:
                events.append((start, +1))
                events.append((last_start + 1, -1))
    if not events:
        raise EmptyCohortError(f"no segment has {min_length} contiguous minutes of records")

    boundaries = sorted({x for x, _ in events})
    deltas: dict[int, int] = {}
    for x, d in events:
        deltas[x] = deltas.get(x, 0) + d
    best_count = 0
    probe_starts: list[int] = []
    count = 0
    for i, x in enumerate(boundaries):
        count += deltas[x]
        if count > best_count:
            best_count = count
            probe_starts = [x]
        elif count == best_count and count > 0:
            probe_starts.append(x)
    if best_count == 0:
        raise EmptyCohortError(f"no segment set shares {min_length} contiguous mutual minutes")

    def covering_set(window_start: int) -> frozenset[str]:
        window_end = window_start + min_length - 1
        return frozenset(
            seg_id
            for seg_id, runs in seg_runs.items()
            if any(a <= window_start and window_end <= b for a, b in runs)
        )

    candidates: dict[frozenset[str], tuple[int, int]] = {}
    for x in probe_starts:
        chosen = covering_set(x)
        if chosen in candidates:
            continue
        mutual = set.intersection(*(times[s] for s in chosen))
        run = _longest_run(np.array(sorted(mutual), dtype=np.int64))
        assert run is not None
        candidates[chosen] = run

    def rank(item: tuple[frozenset[str], tuple[int, int]]):
        ids, (start, end) = item
        return (-(end - start + 1), tuple(sorted(ids)))

    chosen_ids, (grid_start, grid_end) = min(candidates.items(), key=rank)
    grid = np.arange(grid_start, grid_end + 1, dtype=np.int64)

    by_key: dict[tuple[str, int], RawRecord] = {}
    for r in records:
        by_key.setdefault((r.segment_id, r.timestamp), r)  # first occurrence wins

    members = []
    for seg_id in sorted(chosen_ids):
        values = np.empty((2, grid.size))
        for t_idx, minute in enumerate(grid):
            rec = by_key[(seg_id, int(minute))]
            values[0, t_idx] = rec.speed
            values[1, t_idx] = rec.travel_time
        members.append(
            SegmentSeries(
                segment=geometry[seg_id],
                timestamps=grid,
                values=values,
                observed=np.ones_like(values, dtype=bool),
            )
        )
    return Cohort(segments=tuple(members), stream_names=tuple(STREAM_NAMES))


def synthesize_cohort(
    n_segments: int,
    length: int,
    noise_sd: float,
    seed: int,
    n_streams: int = 2,
) -> Cohort:
    """Generate a complete cohort of congestion-dip speed/travel-time traces.

    Stream 0 is speed: a free-flow level of 100 km/h minus a smooth
    bell-shaped trough whose depth and center drift smoothly across segment
    indices, clamped at 5 km/h.  Stream 1 is travel time, 3600 * length_km
    / speed seconds.  Independent multiplicative Gaussian noise of standard
    deviation ``noise_sd`` is applied per stream after the reciprocal
    relation, so ``noise_sd=0`` keeps it exact.
    """
    if n_segments < 1:
        raise PreconditionError(f"n_segments must be >= 1, got {n_segments}")
    if length < 1:
        raise PreconditionError(f"length must be >= 1, got {length}")
    if noise_sd < 0:
        raise PreconditionError(f"noise_sd must be >= 0, got {noise_sd}")
    if n_streams not in (1, 2):
        raise PreconditionError(f"n_streams must be 1 or 2, got {n_streams}")

    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 1.0, size=3)
    lengths_km = np.round(rng.uniform(0.8, 1.2, size=n_segments), 4)
    start_lat = rng.uniform(43.58, 43.90, size=n_segments)
    start_lon = rng.uniform(-79.65, -79.15, size=n_segments)
    headings = rng.uniform(0.0, 2.0 * np.pi, size=n_segments)

    u = np.arange(n_segments) / max(n_segments - 1, 1)
    depth = 30.0 + 25.0 * (0.5 + 0.5 * np.sin(2.0 * np.pi * (1.5 * u + phases[0])))
    center = length * (0.30 + 0.40 * (0.5 + 0.5 * np.sin(2.0 * np.pi * (u + phases[1]))))
    width = length * (0.12 + 0.08 * (0.5 + 0.5 * np.cos(2.0 * np.pi * (2.0 * u + phases[2]))))

    t = np.arange(length, dtype=np.float64)
    dip = depth[:, None] * np.exp(-((t[None, :] - center[:, None]) ** 2) / (2.0 * width[:, None] ** 2))
    speed = np.maximum(_FREE_FLOW_KMH - dip, _MIN_SPEED_KMH)
    travel_time = 3600.0 * lengths_km[:, None] / speed

    eps_speed = rng.normal(0.0, noise_sd, size=speed.shape) if noise_sd > 0 else 0.0
    eps_tt = rng.normal(0.0, noise_sd, size=speed.shape) if noise_sd > 0 else 0.0
    speed = speed * (1.0 + eps_speed)
    travel_time = travel_time * (1.0 + eps_tt)

    timestamps = _SYNTH_START_MIN + np.arange(length, dtype=np.int64)
    pad = max(4, len(str(n_segments - 1)))
    km_per_deg = 111.0
    members = []
    for n in range(n_segments):
        dlat = lengths_km[n] / km_per_deg * np.cos(headings[n])
        dlon = lengths_km[n] / (km_per_deg * np.cos(np.radians(start_lat[n]))) * np.sin(headings[n])
        seg = RoadSegment(
            id=f"seg{n:0{pad}d}",
            start=(round(float(start_lat[n]), 6), round(float(start_lon[n]), 6)),
            end=(round(float(start_lat[n] + dlat), 6), round(float(start_lon[n] + dlon), 6)),
            length=float(lengths_km[n]),
        )
        values = speed[n : n + 1] if n_streams == 1 else np.stack([speed[n], travel_time[n]])
        members.append(
            SegmentSeries(
                segment=seg,
                timestamps=timestamps,
                values=values,
                observed=np.ones_like(values, dtype=bool),
            )
        )
    names = tuple(STREAM_NAMES[:n_streams])
    return Cohort(segments=tuple(members), stream_names=names)


def _rescale(cohort: Cohort, params: tuple[tuple[float, float], ...], forward: bool) -> Cohort:
    members = []
    for s in cohort.segments:
        values = s.values.copy()
        for d, (mn, mx) in enumerate(params):
            span = mx - mn
            obs = s.observed[d]
            if forward:
                values[d, obs] = (values[d, obs] - mn) / span
            else:
                values[d, obs] = values[d, obs] * span + mn
        members.append(replace(s, values=values))
    return Cohort(
        segments=tuple(members),
        stream_names=cohort.stream_names,
        norm_params=params if forward else None,
    )


def fit_norm_params(cohort: Cohort) -> tuple[tuple[float, float], ...]:
    """Per-stream (min, max) over observed entries only."""
    params = []
    for d, name in enumerate(cohort.stream_names):
        observed_values = np.concatenate(
            [s.values[d][s.observed[d]] for s in cohort.segments]
        )
        if observed_values.size == 0:
            raise DegenerateStreamError(f"stream {name!r} has no observed values")
        mn, mx = float(observed_values.min()), float(observed_values.max())
        if mx == mn:
            raise DegenerateStreamError(f"stream {name!r} is constant (min == max == {mn})")
        params.append((mn, mx))
    return tuple(params)


def normalize(cohort: Cohort) -> Cohort:
    """Min-max scale each stream's observed values to [0, 1], storing (min, max)."""
    if cohort.norm_params is not None:
        raise PreconditionError("cohort is already normalized")
    return _rescale(cohort, fit_norm_params(cohort), forward=True)


def apply_normalization(cohort: Cohort, norm_params: tuple[tuple[float, float], ...]) -> Cohort:
    """Scale with externally fitted (min, max) pairs (e.g. from training folds)."""
    if cohort.norm_params is not None:
        raise PreconditionError("cohort is already normalized")
    params = tuple((float(a), float(b)) for a, b in norm_params)
    for (mn, mx), name in zip(params, cohort.stream_names):
        if not mx > mn:
            raise DegenerateStreamError(f"stream {name!r}: max {mx} must exceed min {mn}")
    return _rescale(cohort, params, forward=True)


def denormalize(cohort: Cohort) -> Cohort:
    """Invert :func:`normalize` exactly and clear the stored parameters."""
    if cohort.norm_params is None:
        raise PreconditionError("cohort has no normalization parameters")
    return _rescale(cohort, cohort.norm_params, forward=False)


def subset_cohort(cohort: Cohort, indices) -> Cohort:
    """Cohort restricted to the given segment indices, in the given order."""
    indices = list(indices)
    if not indices:
        raise PreconditionError("subset requires at least one segment index")
    return Cohort(
        segments=tuple(cohort.segments[i] for i in indices),
        stream_names=cohort.stream_names,
        norm_params=cohort.norm_params,
    )


def truncate_cohort(cohort: Cohort, length: int) -> Cohort:
    """Cohort restricted to the first ``length`` grid points of every segment."""
    if not 1 <= length <= cohort.length:
        raise PreconditionError(f"length must be in [1, {cohort.length}], got {length}")
    members = tuple(
        SegmentSeries(
            segment=s.segment,
            timestamps=s.timestamps[:length],
            values=s.values[:, :length],
            observed=s.observed[:, :length],
        )
        for s in cohort.segments
    )
    return Cohort(segments=members, stream_names=cohort.stream_names, norm_params=cohort.norm_params)


def write_cohort_csv(cohort: Cohort, path: str | Path) -> None:
    """Write a cohort in the measurement CSV schema (raw scale).

    Fully observed cohorts use the plain schema; masked cohorts append
    per-stream 0/1 observation columns.  Only the two-stream traffic layout
    is supported for interchange.
    """
    if cohort.n_streams != 2:
        raise PreconditionError("cohort CSV interchange requires exactly 2 streams")
    if cohort.norm_params is not None:
        raise PreconditionError("write raw-scale cohorts only; denormalize first")
    masked = not cohort.fully_observed()
    header = CSV_COLUMNS + (OBSERVED_COLUMNS if masked else [])
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for s in cohort.segments:
            seg = s.segment
            for t_idx, minute in enumerate(s.timestamps):
                row = [
                    seg.id,
                    repr(seg.start[0]),
                    repr(seg.start[1]),
                    repr(seg.end[0]),
                    repr(seg.end[1]),
                    repr(seg.length),
                    str(int(minute)),
                    repr(float(s.values[0, t_idx])),
                    repr(float(s.values[1, t_idx])),
                    "100.0",
                ]
                if masked:
                    row += [str(int(s.observed[0, t_idx])), str(int(s.observed[1, t_idx]))]
                writer.writerow(row)


def read_cohort_csv(path: str | Path) -> Cohort:
    """Read a cohort written by :func:`write_cohort_csv` (masked or complete)."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: no header row") from None
        if header == CSV_COLUMNS:
            masked = False
        elif header == CSV_COLUMNS + OBSERVED_COLUMNS:
            masked = True
        else:
            raise SchemaError(f"malformed header: expected cohort schema, got {','.join(header)!r}")

        order: list[str] = []
        geometry: dict[str, RoadSegment] = {}
        rows: dict[str, list[tuple[int, float, float, bool, bool]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RowError(line_no, f"expected {len(header)} fields, got {len(row)}")
            try:
                seg_id = row[0]
                seg = RoadSegment(
                    id=seg_id,
                    start=(float(row[1]), float(row[2])),
                    end=(float(row[3]), float(row[4])),
                    length=float(row[5]),
                )
                minute = int(row[6])
                speed, tt = float(row[7]), float(row[8])
                if masked:
                    obs_s, obs_t = row[10] == "1", row[11] == "1"
                else:
                    obs_s = obs_t = True
            except ValueError as exc:
                raise RowError(line_no, str(exc)) from None
            if seg_id not in geometry:
                geometry[seg_id] = seg
                order.append(seg_id)
            rows.setdefault(seg_id, []).append((minute, speed, tt, obs_s, obs_t))

    if not order:
        raise SchemaError("cohort file contains no data rows")
    members = []
    for seg_id in order:
        entries = sorted(rows[seg_id], key=lambda e: e[0])
        timestamps = np.array([e[0] for e in entries], dtype=np.int64)
        values = np.array([[e[1] for e in entries], [e[2] for e in entries]])
        observed = np.array([[e[3] for e in entries], [e[4] for e in entries]], dtype=bool)
        members.append(
            SegmentSeries(segment=geometry[seg_id], timestamps=timestamps, values=values, observed=observed)
        )
    return Cohort(segments=tuple(members), stream_names=tuple(STREAM_NAMES))

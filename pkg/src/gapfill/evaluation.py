"""Scoring, k-fold comparison, parameter sweeps, and report emission.

The comparison protocol: a complete cohort is degraded once per
experiment point, segments are split into k folds, the recurrent model
trains on k-1 folds and fills the held-out fold, while the spline and
matrix-completion baselines run directly on the held-out data (the latter
sees the whole degraded matrix but is scored on held-out rows only).
RMSE is computed on the unit scale over artificially removed entries.
All seeds derive from one root seed through a stable hash, so every
report is reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mrnn as mrnn_mod
from .baselines import (
    SoftImputeConfig,
    cohort_to_matrix,
    matrix_to_cohort,
    soft_impute,
    spline_impute_cohort,
)
from .data import (
    Cohort,
    apply_normalization,
    fit_norm_params,
    subset_cohort,
    truncate_cohort,
)
from .errors import ConfigError, PreconditionError, ShapeError, UndefinedMetricError
from .masking import BERNOULLI, GroundTruthLedger, MaskSpec, apply_mask, normalize_ledger

METHOD_MRNN = "mrnn"
METHOD_SPLINE = "spline"
METHOD_SOFTIMPUTE = "softimpute"
ALL_METHODS = (METHOD_MRNN, METHOD_SPLINE, METHOD_SOFTIMPUTE)

REPORT_HEADER = "method,axis,axis_value,fold,n_segments,seq_length,tau,rmse,runtime_s"
ETA_HEADER = "method,vs,eta_pct"

AXIS_TAU = "tau"
AXIS_L = "L"
AXIS_N = "N"
AXIS_LABELS = {
    AXIS_TAU: "missing threshold",
    AXIS_L: "measurements per segment",
    AXIS_N: "road segments",
}

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def stable_seed(*parts) -> int:
    """Order-sensitive 63-bit seed from heterogeneous parts, stable across runs."""
    text = ":".join(repr(p) if isinstance(p, float) else str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def training_loss(x_hat_grids, x_grids, m_grids) -> float:
    """Masked squared error, per-segment normalized and summed over segments."""
    total = 0.0
    for x_hat, x, m in zip(x_hat_grids, x_grids, m_grids, strict=True):
        x_hat, x, m = (np.asarray(a, dtype=np.float64) for a in (x_hat, x, m))
        if not (x_hat.shape == x.shape == m.shape):
            raise ShapeError("x_hat, x, and m grids must share one shape")
        count = m.sum()
        if count == 0:
            continue
        total += float((m * (x_hat - x) ** 2).sum() / count)
    return total


def rmse(cohort: Cohort, ledger: GroundTruthLedger) -> float:
    """Root mean squared error of the fills at the ledger's coordinates."""
    if len(ledger) == 0:
        raise PreconditionError("rmse requires a non-empty ledger")
    errors = np.empty(len(ledger))
    for i, (n, d, t, truth) in enumerate(ledger.entries):
        series = cohort.segments[n]
        if not series.observed[d, t]:
            raise PreconditionError(f"ledger coordinate ({n}, {d}, {t}) is not filled")
        errors[i] = series.values[d, t] - truth
    return float(np.sqrt(np.mean(errors**2)))


def eta(rmse_mrnn: float, rmse_other: float) -> float:
    """Percent RMSE improvement over a counterpart method."""
    if rmse_mrnn <= 0:
        raise UndefinedMetricError(f"eta undefined for rmse_mrnn = {rmse_mrnn}")
    return abs(rmse_mrnn - rmse_other) / rmse_mrnn * 100.0


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    method: str
    axis: str
    axis_value: float
    fold: int
    n_segments: int
    seq_length: int
    tau: float
    rmse: float
    runtime_s: float


@dataclass(frozen=True)
class EtaRow:
    method: str
    vs: str
    eta_pct: float


@dataclass
class ComparisonReport:
    rows: list[ReportRow] = field(default_factory=list)
    etas: list[EtaRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def methods(self) -> list[str]:
        return sorted({r.method for r in self.rows})

    def axis_values(self, axis: str | None = None) -> list[float]:
        return sorted({r.axis_value for r in self.rows if axis is None or r.axis == axis})

    def mean_rmse(self, method: str, axis_value: float | None = None) -> float:
        picked = [
            r.rmse
            for r in self.rows
            if r.method == method and (axis_value is None or r.axis_value == axis_value)
        ]
        if not picked:
            raise PreconditionError(f"report has no rows for method {method!r}")
        return float(np.mean(picked))

    def fold_rmse(self, method: str, axis_value: float | None = None) -> list[float]:
        return [
            r.rmse
            for r in sorted(self.rows, key=lambda r: r.fold)
            if r.method == method and (axis_value is None or r.axis_value == axis_value)
        ]


def _canonical(rows: list[ReportRow]) -> list[ReportRow]:
    return sorted(rows, key=lambda r: (r.method, r.axis, r.axis_value, r.fold))


def _derive_etas(rows: list[ReportRow]) -> list[EtaRow]:
    methods = sorted({r.method for r in rows})
    if METHOD_MRNN not in methods:
        return []
    mean = lambda m: float(np.mean([r.rmse for r in rows if r.method == m]))
    base = mean(METHOD_MRNN)
    return [
        EtaRow(method=METHOD_MRNN, vs=other, eta_pct=eta(base, mean(other)))
        for other in methods
        if other != METHOD_MRNN
    ]


def eta_by_axis_value(report: ComparisonReport, vs: str) -> dict[float, float]:
    """Per-grid-point improvement of the recurrent model over ``vs``."""
    out = {}
    for value in report.axis_values():
        out[value] = eta(
            report.mean_rmse(METHOD_MRNN, value), report.mean_rmse(vs, value)
        )
    return out


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    """Seeded partition of segment indices into k folds (sizes differ <= 1)."""

    k: int
    assignment: tuple[int, ...]
    seed: int

    @classmethod
    def build(cls, n_segments: int, k: int, seed: int) -> "FoldPlan":
        if not 1 <= k <= n_segments:
            raise PreconditionError(f"need 1 <= k <= N, got k={k}, N={n_segments}")
        perm = np.random.default_rng(seed).permutation(n_segments)
        assignment = np.empty(n_segments, dtype=int)
        base, extra = divmod(n_segments, k)
        start = 0
        for f in range(k):
            size = base + (1 if f < extra else 0)
            assignment[perm[start : start + size]] = f
            start += size
        return cls(k=k, assignment=tuple(int(a) for a in assignment), seed=seed)

    def fold_sizes(self) -> list[int]:
        return [self.assignment.count(f) for f in range(self.k)]

    def test_indices(self, fold: int) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a == fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a != fold]


@dataclass(frozen=True)
class FoldJob:
    masked: Cohort
    ledger: GroundTruthLedger
    fold: int
    train_idx: tuple[int, ...]
    test_idx: tuple[int, ...]
    methods: tuple[str, ...]
    train_config: mrnn_mod.TrainConfig
    softimpute_config: SoftImputeConfig
    axis: str
    axis_value: float
    tau_label: float
    n_segments: int
    seq_length: int


def _execute_fold(job: FoldJob) -> list[ReportRow]:
    norm = fit_norm_params(subset_cohort(job.masked, job.train_idx))
    masked_norm = apply_normalization(job.masked, norm)
    ledger_norm = normalize_ledger(job.ledger, norm)

    test_set = set(job.test_idx)
    local = {orig: i for i, orig in enumerate(job.test_idx)}
    test_entries = tuple(
        (local[n], d, t, v) for n, d, t, v in ledger_norm.entries if n in test_set
    )
    if not test_entries:
        raise PreconditionError(f"fold {job.fold} has no held-out missing entries to score")
    test_ledger = GroundTruthLedger(entries=test_entries)
    test_cohort = subset_cohort(masked_norm, job.test_idx)

    rows = []
    for method in job.methods:
        start = time.perf_counter()
        if method == METHOD_MRNN:
            model, _ = mrnn_mod.train(subset_cohort(masked_norm, job.train_idx), job.train_config)
            filled = mrnn_mod.impute(model, test_cohort)
        elif method == METHOD_SPLINE:
            filled = spline_impute_cohort(test_cohort)
        elif method == METHOD_SOFTIMPUTE:
            matrix, mask = cohort_to_matrix(masked_norm)
            completed = soft_impute(matrix, mask, job.softimpute_config)
            filled = matrix_to_cohort(completed[list(job.test_idx)], test_cohort)
        else:
            raise ConfigError(f"unknown method {method!r}")
        value = rmse(filled, test_ledger)
        rows.append(
            ReportRow(
                method=method,
                axis=job.axis,
                axis_value=job.axis_value,
                fold=job.fold,
                n_segments=job.n_segments,
                seq_length=job.seq_length,
                tau=job.tau_label,
                rmse=value,
                runtime_s=time.perf_counter() - start,
            )
        )
    return rows


def _run_jobs(jobs: list[FoldJob], workers: int) -> list[ReportRow]:
    if workers <= 1 or len(jobs) <= 1:
        results = [_execute_fold(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_execute_fold, jobs))
    return [row for rows in results for row in rows]


def cross_validate(
    cohort: Cohort,
    mask_spec: MaskSpec,
    methods: tuple[str, ...] = ALL_METHODS,
    k: int = 5,
    seed: int = 0,
    train_config: mrnn_mod.TrainConfig | None = None,
    softimpute_config: SoftImputeConfig | None = None,
    axis: str = "cv",
    axis_value: float = 0.0,
    workers: int = 1,
) -> ComparisonReport:
    """k-fold comparison of the methods on one degraded cohort.

    The cohort must be complete; entries are removed once with a seed
    derived from ``seed`` (the seed carried by ``mask_spec`` is ignored so
    one root seed governs the whole experiment).  Per fold, normalization
    is fitted on the training folds' observations only and applied
    everywhere, and the held-out fold's removed entries are scored.
    """
    if cohort.n_segments < k:
        raise PreconditionError(f"need at least k={k} segments, cohort has {cohort.n_segments}")
    if not cohort.fully_observed():
        raise PreconditionError("cross_validate requires a complete cohort")
    for method in methods:
        if method not in ALL_METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {ALL_METHODS}")

    masked, ledger = apply_mask(cohort, replace(mask_spec, seed=stable_seed(seed, "mask")))
    plan = FoldPlan.build(cohort.n_segments, k, stable_seed(seed, "folds"))
    base_train = train_config or mrnn_mod.TrainConfig()
    base_si = softimpute_config or SoftImputeConfig()
    tau_label = mask_spec.tau if mask_spec.mode == BERNOULLI else float("nan")

    jobs = [
        FoldJob(
            masked=masked,
            ledger=ledger,
            fold=fold,
            train_idx=tuple(plan.train_indices(fold)),
            test_idx=tuple(plan.test_indices(fold)),
            methods=tuple(methods),
            train_config=replace(base_train, seed=stable_seed(seed, "train", fold)),
            softimpute_config=replace(base_si, seed=stable_seed(seed, "softimpute", fold)),
            axis=axis,
            axis_value=axis_value,
            tau_label=tau_label,
            n_segments=cohort.n_segments,
            seq_length=cohort.length,
        )
        for fold in range(k)
    ]
    rows = _canonical(_run_jobs(jobs, workers))
    report = ComparisonReport(rows=rows, etas=_derive_etas(rows))
    report.meta = {
        "k": k,
        "seed": seed,
        "mask_mode": mask_spec.mode,
        "tau": tau_label,
        "train_config": vars(base_train).copy(),
        "n_segments": cohort.n_segments,
        "seq_length": cohort.length,
    }
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def sweep(
    cohort: Cohort,
    axis: str,
    grid,
    seed: int = 0,
    tau: float = 0.2,
    methods: tuple[str, ...] = ALL_METHODS,
    k: int = 5,
    train_config: mrnn_mod.TrainConfig | None = None,
    softimpute_config: SoftImputeConfig | None = None,
    workers: int = 1,
) -> ComparisonReport:
    """One full cross-validation per grid value along tau, L, or N.

    The tau axis varies the removal probability; the L axis truncates every
    segment's grid to its first L points; the N axis subsamples segments by
    seeded choice.  Every per-point seed derives from the root seed, the
    axis, and the value.
    """
    grid = list(grid)
    if axis not in AXIS_LABELS:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(AXIS_LABELS)}")
    if not grid:
        raise ConfigError("sweep grid must be non-empty")

    reports = []
    for value in grid:
        if axis == AXIS_TAU:
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"invalid tau grid value {value!r}: must be in [0, 1]")
            point_cohort = cohort
            spec = MaskSpec(mode=BERNOULLI, tau=float(value))
        elif axis == AXIS_L:
            if not (float(value).is_integer() and 1 <= int(value) <= cohort.length):
                raise ConfigError(
                    f"invalid L grid value {value!r}: must be an integer in [1, {cohort.length}]"
                )
            point_cohort = truncate_cohort(cohort, int(value))
            spec = MaskSpec(mode=BERNOULLI, tau=tau)
        else:
            if not (float(value).is_integer() and 1 <= int(value) <= cohort.n_segments):
                raise ConfigError(
                    f"invalid N grid value {value!r}: must be an integer in [1, {cohort.n_segments}]"
                )
            rng = np.random.default_rng(stable_seed(seed, "subsample", float(value)))
            picked = sorted(rng.choice(cohort.n_segments, size=int(value), replace=False).tolist())
            point_cohort = subset_cohort(cohort, picked)
            spec = MaskSpec(mode=BERNOULLI, tau=tau)
        reports.append(
            cross_validate(
                point_cohort,
                spec,
                methods=methods,
                k=k,
                seed=stable_seed(seed, axis, float(value)),
                train_config=train_config,
                softimpute_config=softimpute_config,
                axis=axis,
                axis_value=float(value),
                workers=workers,
            )
        )

    rows = _canonical([row for r in reports for row in r.rows])
    merged = ComparisonReport(rows=rows, etas=_derive_etas(rows))
    merged.meta = {"axis": axis, "grid": [float(v) for v in grid], "seed": seed, "k": k, "tau": tau}
    return merged


# ---------------------------------------------------------------------------
# Emission: CSV, SVG, and matplotlib figures
# ---------------------------------------------------------------------------

def emit_report(report: ComparisonReport, path: str | Path) -> None:
    """Write the per-fold rows as CSV (byte-deterministic for a fixed report)."""
    if not report.rows:
        raise PreconditionError("cannot emit an empty report")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER.split(","))
        for r in report.rows:
            writer.writerow(
                [
                    r.method,
                    r.axis,
                    repr(float(r.axis_value)),
                    str(r.fold),
                    str(r.n_segments),
                    str(r.seq_length),
                    repr(float(r.tau)),
                    repr(float(r.rmse)),
                    repr(float(r.runtime_s)),
                ]
            )


def emit_eta_report(report: ComparisonReport, path: str | Path) -> None:
    if not report.etas:
        raise PreconditionError("report has no improvement rows to emit")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ETA_HEADER.split(","))
        for row in sorted(report.etas, key=lambda e: (e.method, e.vs)):
            writer.writerow([row.method, row.vs, repr(float(row.eta_pct))])


def _series_by_method(report: ComparisonReport, axis: str):
    rows = [r for r in report.rows if r.axis == axis]
    if not rows:
        raise PreconditionError(f"report has no rows for axis {axis!r}")
    methods = sorted({r.method for r in rows})
    values = sorted({r.axis_value for r in rows})
    series = {}
    for method in methods:
        means = []
        for v in values:
            picked = [r.rmse for r in rows if r.method == method and r.axis_value == v]
            means.append(float(np.mean(picked)))
        series[method] = means
    return values, series


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def emit_plot(report: ComparisonReport, axis: str, path: str | Path) -> None:
    """Render mean RMSE per method over the axis as plain SVG 1.1.

    One polyline per method on an 800x600 viewBox with axis labels and a
    legend; no external references, byte-deterministic for a fixed report.
    """
    values, series = _series_by_method(report, axis)
    left, right, top, bottom = 80.0, 630.0, 50.0, 540.0
    x_min, x_max = min(values), max(values)
    x_span = (x_max - x_min) or 1.0
    y_max = max(max(m) for m in series.values())
    y_span = (y_max * 1.05) or 1.0

    def sx(v: float) -> float:
        return left + (v - x_min) / x_span * (right - left) if len(values) > 1 else (left + right) / 2

    def sy(v: float) -> float:
        return bottom - v / y_span * (bottom - top)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="0 0 800 600" '
        'width="800" height="600">',
        '<rect x="0" y="0" width="800" height="600" fill="white"/>',
        f'<line x1="{_fmt(left)}" y1="{_fmt(bottom)}" x2="{_fmt(right)}" y2="{_fmt(bottom)}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{_fmt(left)}" y1="{_fmt(top)}" x2="{_fmt(left)}" y2="{_fmt(bottom)}" '
        'stroke="black" stroke-width="1"/>',
    ]
    x_ticks = values if len(values) <= 8 else list(np.linspace(x_min, x_max, 5))
    for v in x_ticks:
        x = sx(v)
        parts.append(
            f'<line x1="{_fmt(x)}" y1="{_fmt(bottom)}" x2="{_fmt(x)}" y2="{_fmt(bottom + 6)}" '
            'stroke="black" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(bottom + 22)}" font-family="sans-serif" '
            f'font-size="13" text-anchor="middle">{v:.4g}</text>'
        )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = frac * y_span
        y = sy(v)
        parts.append(
            f'<line x1="{_fmt(left - 6)}" y1="{_fmt(y)}" x2="{_fmt(left)}" y2="{_fmt(y)}" '
            'stroke="black" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(left - 10)}" y="{_fmt(y + 4)}" font-family="sans-serif" '
            f'font-size="13" text-anchor="end">{v:.4g}</text>'
        )
    parts.append(
        f'<text x="{_fmt((left + right) / 2)}" y="585" font-family="sans-serif" font-size="15" '
        f'text-anchor="middle">{AXIS_LABELS.get(axis, axis)}</text>'
    )
    parts.append(
        '<text x="22" y="295" font-family="sans-serif" font-size="15" text-anchor="middle" '
        'transform="rotate(-90 22 295)">rmse</text>'
    )
    for i, (method, means) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{_fmt(sx(v))},{_fmt(sy(m))}" for v, m in zip(values, means))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>'
        )
        ly = 60 + 24 * i
        parts.append(
            f'<line x1="650" y1="{_fmt(ly)}" x2="680" y2="{_fmt(ly)}" stroke="{color}" '
            'stroke-width="2"/>'
        )
        parts.append(
            f'<text x="688" y="{_fmt(ly + 4)}" font-family="sans-serif" font-size="13">{method}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def emit_figure(report: ComparisonReport, axis: str, path: str | Path, dpi: int = 120) -> None:
    """Render the same curves with matplotlib (PNG or any savefig format)."""
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    values, series = _series_by_method(report, axis)
    fig, ax = plt.subplots(figsize=(8.0, 6.0))
    for method, means in sorted(series.items()):
        ax.plot(values, means, marker="o", label=method)
    ax.set_xlabel(AXIS_LABELS.get(axis, axis))
    ax.set_ylabel("RMSE")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)

"""Comparison methods: per-stream cubic-spline interpolation over time and
low-rank matrix completion over the segment x (stream, time) matrix.

The spline route uses each stream's own history; the completion route uses
the whole cohort at once, so it can exploit similarity across segments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Cohort, SegmentSeries
from .errors import NumericalError, PreconditionError, ShapeError


class NaturalCubicSpline:
    """Natural cubic spline through knots (x, y): S'' = 0 at both ends.

    Interior second derivatives come from the standard tridiagonal system,
    solved by the Thomas algorithm.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 1 or x.size < 2 or x.shape != y.shape:
            raise ShapeError("spline needs matching 1-D x and y with at least 2 knots")
        if np.any(np.diff(x) <= 0):
            raise PreconditionError("spline knots must be strictly increasing")
        self.x = x
        self.y = y
        n = x.size
        m = np.zeros(n)
        if n > 2:
            h = np.diff(x)
            sub = h[:-1].copy()          # a_i, i = 1..n-2
            diag = 2.0 * (h[:-1] + h[1:])
            sup = h[1:].copy()
            rhs = 6.0 * ((y[2:] - y[1:-1]) / h[1:] - (y[1:-1] - y[:-2]) / h[:-1])
            # Thomas forward sweep
            for i in range(1, rhs.size):
                w = sub[i] / diag[i - 1]
                diag[i] -= w * sup[i - 1]
                rhs[i] -= w * rhs[i - 1]
            sol = np.zeros(rhs.size)
            sol[-1] = rhs[-1] / diag[-1]
            for i in range(rhs.size - 2, -1, -1):
                sol[i] = (rhs[i] - sup[i] * sol[i + 1]) / diag[i]
            m[1:-1] = sol
        self.second_derivatives = m

    def __call__(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        x, y, m = self.x, self.y, self.second_derivatives
        i = np.clip(np.searchsorted(x, q, side="right") - 1, 0, x.size - 2)
        h = x[i + 1] - x[i]
        left = x[i + 1] - q
        right = q - x[i]
        return (
            m[i] * left**3 / (6.0 * h)
            + m[i + 1] * right**3 / (6.0 * h)
            + (y[i] - m[i] * h * h / 6.0) * left / h
            + (y[i + 1] - m[i + 1] * h * h / 6.0) * right / h
        )


def spline_impute(series: SegmentSeries) -> SegmentSeries:
    """Fill each stream over time; fully observed output.

    Per stream, with k observed points: k = 0 fills the unit-scale neutral
    0.5; k = 1 fills the constant; k in {2, 3} fills piecewise-linearly;
    k >= 4 fits a natural cubic spline through the observed knots.  Queries
    outside the observed span clamp to the nearest endpoint's value.
    """
    values = series.values.copy()
    t = series.timestamps.astype(np.float64)
    for d in range(series.n_streams):
        obs = series.observed[d]
        missing = ~obs
        if not missing.any():
            continue
        k = int(obs.sum())
        if k == 0:
            values[d, :] = 0.5
        elif k == 1:
            values[d, missing] = values[d, obs][0]
        elif k <= 3:
            values[d, missing] = np.interp(t[missing], t[obs], values[d, obs])
        else:
            xk, yk = t[obs], values[d, obs]
            q = np.clip(t[missing], xk[0], xk[-1])
            values[d, missing] = NaturalCubicSpline(xk, yk)(q)
    return replace(series, values=values, observed=np.ones_like(series.observed))


def spline_impute_cohort(cohort: Cohort) -> Cohort:
    return Cohort(
        segments=tuple(spline_impute(s) for s in cohort.segments),
        stream_names=cohort.stream_names,
        norm_params=cohort.norm_params,
    )


# ---------------------------------------------------------------------------
# Matrix completion
# ---------------------------------------------------------------------------

def cohort_to_matrix(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """(N x D*L values, same-shape observation mask); column d*L + t."""
    n, d, length = cohort.n_segments, cohort.n_streams, cohort.length
    matrix = cohort.values_array().reshape(n, d * length)
    mask = cohort.observed_array().reshape(n, d * length)
    matrix = np.where(mask, matrix, 0.0)
    return matrix, mask


def matrix_to_cohort(matrix: np.ndarray, template: Cohort, mask: np.ndarray | None = None) -> Cohort:
    """Inverse of :func:`cohort_to_matrix` onto the template's grid."""
    n, d, length = template.n_segments, template.n_streams, template.length
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (n, d * length):
        raise ShapeError(f"matrix must be {(n, d * length)}, got {matrix.shape}")
    values = matrix.reshape(n, d, length)
    observed = (
        np.asarray(mask, bool).reshape(n, d, length)
        if mask is not None
        else np.ones((n, d, length), dtype=bool)
    )
    members = tuple(
        replace(s, values=values[i], observed=observed[i]) for i, s in enumerate(template.segments)
    )
    return Cohort(segments=members, stream_names=template.stream_names, norm_params=template.norm_params)


@dataclass(frozen=True)
class SoftImputeConfig:
    """Regularization schedule and stopping rules for :func:`soft_impute`.

    ``lambda_schedule`` of None derives 10 log-spaced values from
    sigma_max/2 down to sigma_max/1000 of the zero-filled observed matrix.
    ``rank_cap`` of None allows rank up to min(rows, cols).  ``seed`` fixes
    the held-back observed entries used to pick the best lambda.
    """

    lambda_schedule: tuple[float, ...] | None = None
    max_iter: int = 200
    tol: float = 1e-5
    rank_cap: int | None = None
    seed: int = 0
    holdback_fraction: float = 0.1

    def __post_init__(self):
        if self.lambda_schedule is not None:
            sched = tuple(float(v) for v in self.lambda_schedule)
            if not sched or any(v <= 0 for v in sched):
                raise PreconditionError("lambda schedule must be non-empty and positive")
            if any(b >= a for a, b in zip(sched, sched[1:])):
                raise PreconditionError("lambda schedule must be strictly descending")
            object.__setattr__(self, "lambda_schedule", sched)
        if not self.tol > 0:
            raise PreconditionError(f"tolerance must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise PreconditionError(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0.0 <= self.holdback_fraction < 1.0:
            raise PreconditionError("holdback_fraction must be in [0, 1)")


def nuclear_objective(x: np.ndarray, mask: np.ndarray, m: np.ndarray, lam: float) -> float:
    """0.5 * ||P_obs(X - M)||_F^2 + lambda * ||M||_*."""
    resid = (x - m)[mask]
    return 0.5 * float(resid @ resid) + lam * float(np.linalg.svd(m, compute_uv=False).sum())


def soft_impute_stage(
    x: np.ndarray,
    mask: np.ndarray,
    m0: np.ndarray,
    lam: float,
    max_iter: int,
    tol: float,
    rank_cap: int | None = None,
    objective_log: list[float] | None = None,
    stage_label: str = "",
) -> np.ndarray:
    """Iterate M <- SVT_lambda(P_obs(X) + P_miss(M)) until relative change < tol.

    ``objective_log``, when given, receives the nuclear-norm objective after
    every iteration (computed from the already-thresholded spectrum).
    """
    m = m0
    for _ in range(max_iter):
        filled = np.where(mask, x, m)
        try:
            u, s, vt = np.linalg.svd(filled, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD failed at lambda stage {stage_label or lam}: {exc}") from None
        s_thr = np.maximum(s - lam, 0.0)
        if rank_cap is not None:
            s_thr[rank_cap:] = 0.0
        m_new = (u * s_thr) @ vt
        if objective_log is not None:
            resid = (x - m_new)[mask]
            objective_log.append(0.5 * float(resid @ resid) + lam * float(s_thr.sum()))
        change = float(np.linalg.norm(m_new - m)) / max(float(np.linalg.norm(m)), 1e-12)
        m = m_new
        if change < tol:
            break
    return m


@dataclass
class SoftImputeResult:
    completed: np.ndarray
    estimate: np.ndarray
    best_lambda: float
    validation_errors: list[tuple[float, float]]


def soft_impute_full(matrix: np.ndarray, mask: np.ndarray, config: SoftImputeConfig) -> SoftImputeResult:
    """Warm-started SVT over the lambda schedule with held-back selection.

    A seeded 10% of observed entries (when at least 10 exist) is hidden
    from the fit; the lambda stage with the smallest error on them wins.
    Observed entries are restored exactly in the completion.
    """
    x = np.asarray(matrix, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if x.shape != mask.shape or x.ndim != 2:
        raise ShapeError("matrix and mask must share one 2-D shape")
    n_obs = int(mask.sum())
    if n_obs == 0:
        raise PreconditionError("soft_impute requires at least one observed entry")

    fit_mask = mask
    hold = None
    if config.holdback_fraction > 0 and n_obs >= 10:
        n_hold = max(1, int(round(config.holdback_fraction * n_obs)))
        rng = np.random.default_rng(config.seed)
        coords = np.argwhere(mask)
        picked = coords[rng.choice(n_obs, size=n_hold, replace=False)]
        hold = (picked[:, 0], picked[:, 1])
        fit_mask = mask.copy()
        fit_mask[hold] = False
        if not fit_mask.any():
            fit_mask, hold = mask, None

    if config.lambda_schedule is not None:
        schedule = config.lambda_schedule
    else:
        sigma_max = float(np.linalg.svd(np.where(fit_mask, x, 0.0), compute_uv=False)[0])
        if sigma_max <= 0.0:
            schedule = (1e-8,)
        else:
            schedule = tuple(np.geomspace(sigma_max / 2.0, sigma_max / 1000.0, 10))

    rank_cap = config.rank_cap
    if rank_cap is not None and not 1 <= rank_cap <= min(x.shape):
        raise PreconditionError(f"rank_cap must be in [1, {min(x.shape)}], got {rank_cap}")

    m = np.zeros_like(x)
    best_err = np.inf
    best_m = m
    best_lam = schedule[-1]
    validation: list[tuple[float, float]] = []
    for i, lam in enumerate(schedule):
        m = soft_impute_stage(
            x, fit_mask, m, lam, config.max_iter, config.tol, rank_cap,
            stage_label=f"{i}",
        )
        if hold is not None:
            err = float(np.sqrt(np.mean((m[hold] - x[hold]) ** 2)))
            validation.append((float(lam), err))
            if err < best_err:
                best_err, best_m, best_lam = err, m.copy(), float(lam)
    if hold is None:
        best_m, best_lam = m, float(schedule[-1])

    completed = np.where(mask, x, best_m)
    return SoftImputeResult(
        completed=completed, estimate=best_m, best_lambda=best_lam, validation_errors=validation
    )


def soft_impute(matrix: np.ndarray, mask: np.ndarray, config: SoftImputeConfig) -> np.ndarray:
    """Completion with observed entries restored exactly."""
    return soft_impute_full(matrix, mask, config).completed


def soft_impute_cohort(cohort: Cohort, config: SoftImputeConfig) -> Cohort:
    matrix, mask = cohort_to_matrix(cohort)
    completed = soft_impute(matrix, mask, config)
    return matrix_to_cohort(completed, cohort)

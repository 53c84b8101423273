"""Command-line entry point: gapfill <subcommand> --flag value ...

Exit status 0 on success, 1 on validation/usage errors, 2 on runtime
errors.  Every run echoes its fully resolved configuration (including the
seed) as one JSON line on standard error, so any output can be reproduced
bit-for-bit from that line.  Report files omit wall-clock runtimes unless
--timings is passed, keeping reruns byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import data as data_mod
from . import evaluation as eval_mod
from . import masking as mask_mod
from . import mrnn as mrnn_mod
from .baselines import SoftImputeConfig
from .errors import GapfillError
from .nncore import grad_check

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="gapfill", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gapfill {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parents=[], help="synthesize a complete cohort CSV")
    p.add_argument("--n", type=int, required=True, help="number of road segments")
    p.add_argument("--length", type=int, required=True, help="grid points per segment")
    p.add_argument("--noise-sd", type=float, default=0.05, help="multiplicative noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output cohort CSV path")

    p = sub.add_parser("ingest", help="parse raw measurements and select a cohort")
    p.add_argument("--in", dest="infile", required=True, help="raw measurement CSV")
    p.add_argument("--min-confidence", type=float, default=95.0)
    p.add_argument("--min-length", type=int, default=1)
    p.add_argument("--out", required=True, help="output cohort CSV path")

    p = sub.add_parser("mask", help="remove entries from a complete cohort")
    p.add_argument("--in", dest="infile", required=True, help="complete cohort CSV")
    p.add_argument("--tau", type=float, default=None, help="independent removal probability")
    p.add_argument("--gaussian-center", type=float, default=None, help="burst center (grid index)")
    p.add_argument("--gaussian-sd", type=float, default=None, help="burst spread (grid indices)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="masked cohort CSV path")
    p.add_argument("--ledger-out", required=True, help="ground-truth ledger CSV path")

    p = sub.add_parser("train", help="fit the recurrent imputation model")
    p.add_argument("--in", dest="infile", required=True, help="masked cohort CSV")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-out", required=True, help="model checkpoint JSON path")

    p = sub.add_parser("impute", help="fill a masked cohort with a trained model")
    p.add_argument("--in", dest="infile", required=True, help="masked cohort CSV")
    p.add_argument("--model", required=True, help="model checkpoint JSON")
    p.add_argument("--out", required=True, help="completed cohort CSV path")

    p = sub.add_parser("eval", help="score imputation methods against a ledger")
    p.add_argument("--in", dest="infile", required=True, help="masked cohort CSV")
    p.add_argument("--model", default=None, help="model checkpoint JSON (needed for mrnn)")
    p.add_argument("--ledger", required=True, help="ground-truth ledger CSV")
    p.add_argument("--methods", default="mrnn,spline,softimpute")
    p.add_argument("--report-out", required=True, help="report CSV path")
    p.add_argument("--eta-out", default=None, help="improvement summary CSV path")
    p.add_argument("--timings", action="store_true", help="include wall-clock runtimes in reports")

    p = sub.add_parser("sweep", help="cross-validated comparison over a parameter grid")
    p.add_argument("--in", dest="infile", default=None,
                   help="complete cohort CSV (omit to synthesize one)")
    p.add_argument("--axis", required=True, choices=sorted(eval_mod.AXIS_LABELS))
    p.add_argument("--grid", required=True, help="comma-separated grid values")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.2, help="removal probability for L/N axes")
    p.add_argument("--methods", default="mrnn,spline,softimpute")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--synth-n", type=int, default=382, help="segments when synthesizing")
    p.add_argument("--synth-length", type=int, default=85, help="grid length when synthesizing")
    p.add_argument("--noise-sd", type=float, default=0.05, help="noise when synthesizing")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--report-out", required=True, help="report CSV path")
    p.add_argument("--eta-out", default=None, help="improvement summary CSV path")
    p.add_argument("--plot-out", default=None, help="SVG line chart path")
    p.add_argument("--figure-out", default=None, help="matplotlib figure path (png/pdf)")
    p.add_argument("--timings", action="store_true", help="include wall-clock runtimes in reports")

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    p.add_argument("--seed", type=int, default=7)

    return parser


def _fail_usage(flag: str, message: str) -> None:
    raise UsageError(f"gapfill: error: {flag}: {message}")


def _require_file(flag: str, value: str) -> Path:
    path = Path(value)
    if not path.is_file():
        _fail_usage(flag, f"file not found: {value}")
    return path


def _echo_config(args: argparse.Namespace) -> None:
    config = {k: v for k, v in vars(args).items()}
    config["version"] = __version__
    print(json.dumps(config, sort_keys=True, default=str), file=sys.stderr)


def _parse_methods(text: str) -> tuple[str, ...]:
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    for m in methods:
        if m not in eval_mod.ALL_METHODS:
            _fail_usage("--methods", f"unknown method {m!r}; choose from {eval_mod.ALL_METHODS}")
    if not methods:
        _fail_usage("--methods", "at least one method is required")
    return methods


def _strip_runtimes(report: eval_mod.ComparisonReport, timings: bool) -> eval_mod.ComparisonReport:
    if timings:
        return report
    report.rows = [replace(r, runtime_s=0.0) for r in report.rows]
    return report


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    if args.n < 1:
        _fail_usage("--n", f"must be >= 1, got {args.n}")
    if args.length < 1:
        _fail_usage("--length", f"must be >= 1, got {args.length}")
    if args.noise_sd < 0:
        _fail_usage("--noise-sd", f"must be >= 0, got {args.noise_sd}")
    cohort = data_mod.synthesize_cohort(
        n_segments=args.n, length=args.length, noise_sd=args.noise_sd, seed=args.seed
    )
    data_mod.write_cohort_csv(cohort, args.out)
    print(f"wrote {cohort.n_segments} segments x {cohort.length} minutes to {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    path = _require_file("--in", args.infile)
    if not 0.0 <= args.min_confidence <= 100.0:
        _fail_usage("--min-confidence", f"must be in [0, 100], got {args.min_confidence}")
    if args.min_length < 1:
        _fail_usage("--min-length", f"must be >= 1, got {args.min_length}")
    result = data_mod.ingest_csv(path, min_confidence=args.min_confidence)
    cohort = data_mod.select_cohort(result.records, result.segments, min_length=args.min_length)
    data_mod.write_cohort_csv(cohort, args.out)
    print(
        f"kept {len(result.records)} records ({result.dropped_low_confidence} below confidence), "
        f"selected {cohort.n_segments} segments x {cohort.length} minutes"
    )
    return 0


def _cmd_mask(args) -> int:
    path = _require_file("--in", args.infile)
    gaussian = args.gaussian_center is not None or args.gaussian_sd is not None
    if gaussian and args.tau is not None:
        _fail_usage("--tau", "choose either --tau or the gaussian flags, not both")
    if gaussian:
        if args.gaussian_center is None or args.gaussian_sd is None:
            _fail_usage("--gaussian-center", "gaussian masking needs both center and sd")
        if args.gaussian_sd <= 0:
            _fail_usage("--gaussian-sd", f"must be > 0, got {args.gaussian_sd}")
        spec = mask_mod.MaskSpec(
            mode=mask_mod.GAUSSIAN, center=args.gaussian_center, sd=args.gaussian_sd, seed=args.seed
        )
    else:
        if args.tau is None:
            _fail_usage("--tau", "required unless gaussian flags are given")
        if not 0.0 <= args.tau <= 1.0:
            _fail_usage("--tau", f"must be in [0, 1], got {args.tau}")
        spec = mask_mod.MaskSpec(mode=mask_mod.BERNOULLI, tau=args.tau, seed=args.seed)
    cohort = data_mod.read_cohort_csv(path)
    masked, ledger = mask_mod.apply_mask(cohort, spec)
    data_mod.write_cohort_csv(masked, args.out)
    mask_mod.write_ledger_csv(ledger, args.ledger_out)
    total = cohort.n_segments * cohort.n_streams * cohort.length
    print(f"removed {len(ledger)} of {total} entries; masked cohort -> {args.out}, ledger -> {args.ledger_out}")
    return 0


def _train_config_from(args) -> mrnn_mod.TrainConfig:
    if args.epochs < 1:
        _fail_usage("--epochs", f"must be >= 1, got {args.epochs}")
    if args.lr <= 0:
        _fail_usage("--lr", f"must be > 0, got {args.lr}")
    if args.batch < 1:
        _fail_usage("--batch", f"must be >= 1, got {args.batch}")
    if args.patience < 1:
        _fail_usage("--patience", f"must be >= 1, got {args.patience}")
    return mrnn_mod.TrainConfig(
        lr=args.lr, epochs=args.epochs, batch=args.batch, patience=args.patience, seed=args.seed
    )


def _cmd_train(args) -> int:
    path = _require_file("--in", args.infile)
    config = _train_config_from(args)
    cohort = data_mod.normalize(data_mod.read_cohort_csv(path))
    model, trace = mrnn_mod.train(cohort, config)
    mrnn_mod.save_model(model, args.model_out)
    last = trace[-1]
    print(
        f"trained {len(trace) - 1} epochs: train loss {trace[0].train_loss:.6f} -> {last.train_loss:.6f}, "
        f"best val {min(t.val_loss for t in trace):.6f}; model -> {args.model_out}"
    )
    return 0


def _cmd_impute(args) -> int:
    path = _require_file("--in", args.infile)
    model_path = _require_file("--model", args.model)
    model = mrnn_mod.load_model(model_path)
    if model.norm_params is None:
        raise GapfillError(f"--model {args.model}: checkpoint carries no normalization parameters")
    cohort = data_mod.apply_normalization(data_mod.read_cohort_csv(path), model.norm_params)
    filled = mrnn_mod.impute(model, cohort)
    data_mod.write_cohort_csv(data_mod.denormalize(filled), args.out)
    print(f"filled cohort -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import time

    from .baselines import cohort_to_matrix, matrix_to_cohort, soft_impute, spline_impute_cohort

    path = _require_file("--in", args.infile)
    ledger_path = _require_file("--ledger", args.ledger)
    methods = _parse_methods(args.methods)
    model = None
    if eval_mod.METHOD_MRNN in methods:
        if args.model is None:
            _fail_usage("--model", "required when scoring the mrnn method")
        model = mrnn_mod.load_model(_require_file("--model", args.model))

    raw = data_mod.read_cohort_csv(path)
    ledger = mask_mod.read_ledger_csv(ledger_path)
    norm = model.norm_params if model is not None and model.norm_params else data_mod.fit_norm_params(raw)
    cohort = data_mod.apply_normalization(raw, norm)
    ledger_norm = mask_mod.normalize_ledger(ledger, norm)

    rows = []
    for method in methods:
        start = time.perf_counter()
        if method == eval_mod.METHOD_MRNN:
            filled = mrnn_mod.impute(model, cohort)
        elif method == eval_mod.METHOD_SPLINE:
            filled = spline_impute_cohort(cohort)
        else:
            matrix, mask = cohort_to_matrix(cohort)
            completed = soft_impute(matrix, mask, SoftImputeConfig(seed=eval_mod.stable_seed(0, "si")))
            filled = matrix_to_cohort(completed, cohort)
        value = eval_mod.rmse(filled, ledger_norm)
        rows.append(
            eval_mod.ReportRow(
                method=method, axis="eval", axis_value=0.0, fold=0,
                n_segments=cohort.n_segments, seq_length=cohort.length,
                tau=float("nan"), rmse=value, runtime_s=time.perf_counter() - start,
            )
        )
        print(f"{method}: rmse {value:.6f}")
    rows.sort(key=lambda r: r.method)
    report = eval_mod.ComparisonReport(rows=rows, etas=eval_mod._derive_etas(rows))
    _strip_runtimes(report, args.timings)
    eval_mod.emit_report(report, args.report_out)
    if args.eta_out:
        eval_mod.emit_eta_report(report, args.eta_out)
        for row in report.etas:
            print(f"improvement vs {row.vs}: {row.eta_pct:.2f}%")
    return 0


def _cmd_sweep(args) -> int:
    methods = _parse_methods(args.methods)
    if args.folds < 2:
        _fail_usage("--folds", f"must be >= 2, got {args.folds}")
    if not 0.0 <= args.tau <= 1.0:
        _fail_usage("--tau", f"must be in [0, 1], got {args.tau}")
    if args.workers < 1:
        _fail_usage("--workers", f"must be >= 1, got {args.workers}")
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        _fail_usage("--grid", f"cannot parse {args.grid!r} as comma-separated numbers")
    if not grid:
        _fail_usage("--grid", "grid must be non-empty")
    config = _train_config_from(args)

    if args.infile is not None:
        cohort = data_mod.read_cohort_csv(_require_file("--in", args.infile))
        if not cohort.fully_observed():
            _fail_usage("--in", "sweep needs a complete cohort (mask is applied per grid point)")
    else:
        cohort = data_mod.synthesize_cohort(
            n_segments=args.synth_n, length=args.synth_length,
            noise_sd=args.noise_sd, seed=eval_mod.stable_seed(args.seed, "synth"),
        )

    report = eval_mod.sweep(
        cohort, args.axis, grid, seed=args.seed, tau=args.tau, methods=methods,
        k=args.folds, train_config=config, workers=args.workers,
    )
    _strip_runtimes(report, args.timings)
    eval_mod.emit_report(report, args.report_out)
    outputs = [args.report_out]
    if args.eta_out:
        eval_mod.emit_eta_report(report, args.eta_out)
        outputs.append(args.eta_out)
    if args.plot_out:
        eval_mod.emit_plot(report, args.axis, args.plot_out)
        outputs.append(args.plot_out)
    if args.figure_out:
        eval_mod.emit_figure(report, args.axis, args.figure_out)
        outputs.append(args.figure_out)
    for method in report.methods():
        for value in report.axis_values():
            print(f"{method} @ {args.axis}={value:g}: mean rmse {report.mean_rmse(method, value):.6f}")
    print("wrote " + ", ".join(outputs))
    return 0


def _cmd_gradcheck(args) -> int:
    cohort = data_mod.synthesize_cohort(n_segments=2, length=6, noise_sd=0.05, seed=args.seed)
    masked, _ = mask_mod.apply_mask(
        cohort, mask_mod.MaskSpec(tau=0.3, seed=eval_mod.stable_seed(args.seed, "mask"))
    )
    normalized = data_mod.normalize(masked)
    z, m, dn, delta_scale = mrnn_mod.cohort_arrays(normalized)
    model = mrnn_mod.new_model(normalized.n_streams, seed=args.seed, delta_scale=delta_scale)

    def loss_fn(params):
        return mrnn_mod.loss_and_gradients(params, z, m, dn)

    error = grad_check(loss_fn, model.params)
    passed = error < GRADCHECK_TOLERANCE
    print(f"max relative gradient error: {error:.3e} ({'PASS' if passed else 'FAIL'} at {GRADCHECK_TOLERANCE:.0e})")
    return 0 if passed else 2


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "mask": _cmd_mask,
    "train": _cmd_train,
    "impute": _cmd_impute,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None) -> int:
    """Parse arguments, echo the resolved configuration, and dispatch."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _echo_config(args)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except GapfillError as exc:
        print(f"gapfill {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"gapfill {args.command}: i/o error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())

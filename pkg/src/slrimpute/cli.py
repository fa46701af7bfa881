"""Command-line front end: ``slrimpute {analyze,simulate,validate}``.

Reports are written to ``--out`` as ``report.txt``, ``report.csv`` and
``report.json``. Each embeds the effective configuration and the package
version. Wall-clock timings go to ``timings.json`` so the reports stay
byte-identical across runs with the same inputs and seed.

Exit codes: 0 success, 2 usage error, 3 data or configuration error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from .analysis import AnalysisModel
from .dataset import ColumnSchema, change_from_baseline, read_trial_csv, validate
from .errors import DataError, InferenceError, NumericalError, SlrImputeError
from .inference import PipelineSpec, bootstrap, jackknife
from .simulation import MethodSpec, builtin_scenario, load_scenario, run_study

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
# settings that do not change results; kept out of the echoed config
_NON_RESULT_KEYS = {"threads", "out", "func"}


class CliUsageError(Exception):
    pass


def _csv_list(text):
    if text is None:
        return None
    return tuple(s.strip() for s in text.split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slrimpute", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--out", default=".", help="output directory (created if needed)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker threads; results do not depend on this (default: all cores)")

    a = sub.add_parser("analyze", help="estimate a treatment effect from a long-format CSV")
    a.add_argument("--input", required=True)
    a.add_argument("--schema", help="YAML mapping of column roles (id, visit, arm, outcome, on_treatment, covariates, stratum)")
    a.add_argument("--strategy", choices=["hypothetical", "j2r", "cir"], default="cir")
    a.add_argument("--visit", type=int, default=None, help="analysis visit (default: last)")
    a.add_argument("--covariates", default=None, help="comma-separated analysis covariates (default: all)")
    a.add_argument("--imputation-covariates", default=None,
                   help="comma-separated covariates for the imputation models (default: all)")
    a.add_argument("--change-from-baseline", action="store_true",
                   help="analyse Y_j - Y_0 with baseline as a covariate")
    a.add_argument("--inference", choices=["none", "jackknife", "bootstrap"], default="jackknife")
    a.add_argument("--boot-samples", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--dump-replicates", action="store_true", help="write replicates.csv")
    common(a)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a simulation study")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario YAML file")
    src.add_argument("--setting", type=int, choices=[1, 2, 3, 4], help="built-in setting")
    s.add_argument("--n-sims", type=int, default=200)
    s.add_argument("--n-per-arm", type=int, default=None, help="override the scenario sample size")
    s.add_argument("--inference", choices=["jackknife", "bootstrap", "both"], default="both")
    s.add_argument("--boot-samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--truth", type=float, default=None,
                   help="treatment-policy truth (default: the scenario's policy_truth, else Monte Carlo)")
    s.add_argument("--n-mc", type=int, default=10**6, help="Monte Carlo patients per arm for the truth")
    s.add_argument("--dump-replicates", action="store_true", help="write replicates.csv")
    common(s)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="check a long-format CSV and summarise missingness")
    v.add_argument("--input", required=True)
    v.add_argument("--schema")
    common(v)
    v.set_defaults(func=cmd_validate)
    return ap


def effective_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in _NON_RESULT_KEYS}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}


def _load_schema(path) -> ColumnSchema:
    if path is None:
        return ColumnSchema()
    try:
        with open(path) as fh:
            mapping = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise DataError(f"cannot read schema {path}: {exc.strerror}") from None
    if not isinstance(mapping, dict):
        raise DataError(f"{path}: schema must be a mapping")
    return ColumnSchema.from_mapping(mapping)


def _read_input(path, schema_path):
    if not Path(path).is_file():
        raise DataError(f"input file not found: {path}")
    return read_trial_csv(path, _load_schema(schema_path))


def _kv_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in rows:
        w.writerow([k, "" if v is None else (repr(v) if isinstance(v, float) else v)])
    return buf.getvalue()


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _write_json(out: Path, name: str, obj):
    _write(out, name, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def cmd_analyze(args) -> int:
    t0 = time.perf_counter()
    ds = _read_input(args.input, args.schema)
    if args.change_from_baseline:
        ds = change_from_baseline(ds)
    covs = ds.covariate_names if args.covariates is None else _csv_list(args.covariates)
    imp_covs = ds.covariate_names if args.imputation_covariates is None else _csv_list(args.imputation_covariates)
    for name in (*covs, *imp_covs):
        if name not in ds.covariate_names:
            raise DataError(f"unknown covariate {name!r}; available: {list(ds.covariate_names)}")
    if not 0 < args.alpha < 1:
        raise CliUsageError("--alpha must lie in (0, 1)")
    spec = PipelineSpec(args.strategy, imp_covs, AnalysisModel(args.visit, covs))
    t_load = time.perf_counter()
    if args.inference == "jackknife":
        est = jackknife(ds, spec, alpha=args.alpha, workers=args.threads)
    elif args.inference == "bootstrap":
        est = bootstrap(ds, spec, m=args.boot_samples, seed=args.seed, alpha=args.alpha, workers=args.threads)
    else:
        est = spec.run(ds)
    t_fit = time.perf_counter()

    result = est.as_dict()
    result["visit"] = spec.model.resolve_visit(ds.n_visits)
    result["n_patients"] = ds.n_patients
    config = effective_config(args)
    out = Path(args.out)
    lines = [
        f"slrimpute {__version__} analyze",
        f"input: {args.input}",
        f"patients: {ds.n_patients}; visits: {ds.n_visits}; analysis visit: {result['visit']}",
        f"method: {est.method} ({est.inference})",
        f"treatment effect: {est.point:.4f}",
        f"marginal mean active: {est.marginal_means[0]:.4f}",
        f"marginal mean control: {est.marginal_means[1]:.4f}",
    ]
    if est.se is not None:
        lines.append(f"standard error: {est.se:.4f}")
        lines.append(f"{100 * est.ci_level:g}% CI: ({est.ci[0]:.4f}, {est.ci[1]:.4f})")
    if "ci_normal_low" in est.extra:
        lines.append(f"normal-approximation CI: ({est.extra['ci_normal_low']:.4f}, {est.extra['ci_normal_high']:.4f})")
    if est.n_failures:
        lines.append(f"failed resamples: {est.n_failures}")
    lines.append("config: " + json.dumps(config, sort_keys=True))
    _write(out, "report.txt", "\n".join(lines) + "\n")
    rows = [("version", __version__)] + list(result.items()) + [(f"config.{k}", v) for k, v in config.items()]
    _write(out, "report.csv", _kv_csv(rows))
    _write_json(out, "report.json", {"version": __version__, "config": config, "result": result})
    if args.dump_replicates and est.replicates is not None:
        _write(out, "replicates.csv", est.replicates.to_csv())
    _write_json(out, "timings.json", {"load_seconds": t_load - t0, "estimate_seconds": t_fit - t_load,
                                      "total_seconds": time.perf_counter() - t0})
    print("\n".join(lines[3:-1]))
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario) if args.scenario else builtin_scenario(args.setting)
    if args.n_per_arm is not None:
        scenario = replace(scenario, n_per_arm=args.n_per_arm)
    if args.n_sims < 1:
        raise CliUsageError("--n-sims must be positive")
    if not 0 < args.alpha < 1:
        raise CliUsageError("--alpha must lie in (0, 1)")
    pipe = PipelineSpec(scenario.truth, scenario.covariate_names, AnalysisModel(covariates=scenario.covariate_names))
    kinds = ["jackknife", "bootstrap"] if args.inference == "both" else [args.inference]
    methods = [MethodSpec(pipe, k, args.boot_samples) for k in kinds]
    report = run_study(scenario, args.n_sims, methods, seed=args.seed, truth=args.truth, alpha=args.alpha,
                       workers=args.threads, n_mc=args.n_mc)
    config = effective_config(args)
    out = Path(args.out)
    table = report.format_table()
    _write(out, "report.txt", f"slrimpute {__version__} simulate\n{table}config: {json.dumps(config, sort_keys=True)}\n")
    _write(out, "report.csv", report.to_csv())
    summaries = [vars(s) for s in report.summaries]
    _write_json(out, "report.json", {
        "version": __version__, "config": config, "scenario": scenario.to_mapping(),
        "truth": report.truth, "missing_fraction": report.missing_fraction, "methods": summaries,
    })
    if args.dump_replicates:
        _write(out, "replicates.csv", report.replicates_csv())
    _write_json(out, "timings.json", {
        "seconds_by_method": report.seconds,
        "seconds_per_replicate": report.seconds["total"] / args.n_sims,
    })
    print(table, end="")
    return EXIT_OK


def cmd_validate(args) -> int:
    ds = _read_input(args.input, args.schema)
    rep = validate(ds)
    text = f"slrimpute {__version__} validate\ninput: {args.input}\n" + rep.format()
    _write(Path(args.out), "validation.txt", text)
    print(text, end="")
    return EXIT_OK if rep.ok else EXIT_DATA


def _error_line(exc) -> str:
    module = getattr(exc, "module", "cli")
    msg = str(exc)
    prefix = f"{module}: "
    if msg.startswith(prefix):
        msg = msg[len(prefix):]
    msg = " ".join(msg.split())
    return f"slrimpute: error: module={module} type={type(exc).__name__} message={msg}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        return args.func(args)
    except CliUsageError as exc:
        print(f"slrimpute: error: module=cli type=UsageError message={exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, InferenceError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_NUMERICAL
    except SlrImputeError as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"slrimpute: error: module=cli type=ValueError message={exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

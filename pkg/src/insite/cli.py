"""Command-line entry point: generate, discover, finetune, evaluate, report, sweep and run.

Every subcommand reads an experiment spec (``--spec``) and works inside an
output directory (``--out``) laid out as::

    <out>/manifest.json
    <out>/seed_<s>/{train,val,test}.csv (+ .meta)
    <out>/seed_<s>/population.{json,txt}   discovery.txt
    <out>/seed_<s>/patients.{json,txt}
    <out>/seed_<s>/report_long.csv
    <out>/report.csv  report_long.csv

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.  A
failure also writes a JSON record to stderr (and ``<out>/failure.json`` when
the directory is writable).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentSpec, SpecError, parse_spec
from .discovery import discovery_report
from .evaluation import EvaluationReport, evaluate_models, evaluation_items, fit_population, generate_split, \
    run_benchmark
from .finetune import finetune_batch
from .ode import DivergenceError, MissingRegimeError, load_model, save_model
from .trajectory import DatasetFormatError, read_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SPLITS = ("train", "val", "test")
SWEEPABLE = {
    "gamma": float, "n_train": int, "obs_noise_sd": float, "library": str, "lam": float,
    "drop_fraction": float, "obs_map": str, "threshold": float,
}


class NumericFailure(RuntimeError):
    pass


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def _seeds(spec: ExperimentSpec, offset: int) -> list[int]:
    return [s + offset for s in spec.seeds]


def write_manifest(spec: ExperimentSpec, out: Path, seeds: list[int], command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "insite", "version": __version__, "command": command,
        "spec_sha256": spec.digest(), "seeds": seeds, "spec": spec.to_text(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "spec.txt").write_text(spec.to_text(), encoding="utf-8")


def _generate_seed(spec: ExperimentSpec, out: Path, seed: int) -> None:
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    d = _seed_dir(out, seed)
    d.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        if sizes[split] > 0:
            write_dataset(generate_split(spec, seed, split, sizes[split]), d / f"{split}.csv")


def _discover_seed(spec: ExperimentSpec, out: Path, seed: int) -> None:
    d = _seed_dir(out, seed)
    popn, pooled = fit_population(spec, read_dataset(d / "train.csv"))
    save_model(popn, d / "population")
    text = discovery_report(popn)
    if pooled is not None:
        save_model(pooled, d / "pooled")
        text += "# pooled single ODE\n" + discovery_report(pooled)
    (d / "discovery.txt").write_text(text, encoding="utf-8")


def _finetune_seed(spec: ExperimentSpec, out: Path, seed: int) -> None:
    """Per-patient constants fit on each test patient's longest evaluable history."""
    d = _seed_dir(out, seed)
    popn, _ = load_model(d / "population")
    last = {}
    for tr, t in evaluation_items(read_dataset(d / "test.csv"), spec):
        last[tr.patient_id] = (tr, t)
    items = [last[k] for k in sorted(last)]
    models = finetune_batch(popn, items, spec.finetune()) if items else []
    save_model(popn, d / "patients", models)


def _evaluate_seed(spec: ExperimentSpec, out: Path, seed: int) -> EvaluationReport:
    d = _seed_dir(out, seed)
    popn, _ = load_model(d / "population")
    pooled = load_model(d / "pooled")[0] if (d / "pooled.json").exists() else None
    part, _ = evaluate_models(spec, seed, read_dataset(d / "test.csv"), popn, pooled)
    (d / "report_long.csv").write_text(part.to_long(), encoding="utf-8")
    return part


def _per_seed(fn, spec: ExperimentSpec, out: Path, seeds: list[int], workers: int) -> list:
    """Apply ``fn`` to every seed, in worker processes when allowed; results come back in seed order."""
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            return list(pool.map(fn, [spec] * len(seeds), [out] * len(seeds), seeds))
    return [fn(spec, out, s) for s in seeds]


def cmd_generate(spec: ExperimentSpec, out: Path, seeds: list[int], workers: int = 1) -> None:
    _per_seed(_generate_seed, spec, out, seeds, workers)


def cmd_discover(spec: ExperimentSpec, out: Path, seeds: list[int], workers: int = 1) -> None:
    _per_seed(_discover_seed, spec, out, seeds, workers)


def cmd_finetune(spec: ExperimentSpec, out: Path, seeds: list[int], workers: int = 1) -> None:
    _per_seed(_finetune_seed, spec, out, seeds, workers)


def cmd_evaluate(spec: ExperimentSpec, out: Path, seeds: list[int], workers: int = 1) -> EvaluationReport:
    report = EvaluationReport()
    for part in _per_seed(_evaluate_seed, spec, out, seeds, workers):
        report = report.merge(part)
    _write_report(report, out)
    return report


def _write_report(report: EvaluationReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_table(), encoding="utf-8")
    (out / "report_long.csv").write_text(report.to_long(), encoding="utf-8")
    if report.failures:
        (out / "failures.json").write_text(json.dumps(report.failures, indent=1) + "\n", encoding="utf-8")


def cmd_report(out: Path, seeds: list[int] | None = None) -> EvaluationReport:
    """Merge per-seed long-form reports found under ``out``."""
    report = EvaluationReport()
    paths = sorted(out.glob("seed_*/report_long.csv"))
    if seeds is not None:
        paths = [p for p in paths if int(p.parent.name.split("_", 1)[1]) in seeds]
    if not paths:
        raise FileNotFoundError(f"no per-seed reports under {out}")
    for p in paths:
        report = report.merge(EvaluationReport.from_long(p.read_text(encoding="utf-8")))
    return report


def cmd_run(spec: ExperimentSpec, out: Path, seeds: list[int], workers: int = 1) -> EvaluationReport:
    cmd_generate(spec, out, seeds, workers)
    cmd_discover(spec, out, seeds, workers)
    cmd_finetune(spec, out, seeds, workers)
    return cmd_evaluate(spec, out, seeds, workers)


def cmd_sweep(spec: ExperimentSpec, out: Path, param: str, values: list[str], workers: int,
              seed_offset: int) -> str:
    """One benchmark run per value of ``param``; writes a plot-ready long file."""
    if param not in SWEEPABLE:
        raise SpecError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    lines = ["param,value,dataset,method,tau,mean_nrmse,ci95_half_width,n_seeds"]
    failures = []
    for raw in values:
        try:
            variant = replace(spec, **{param: SWEEPABLE[param](raw)})
        except (ValueError, TypeError) as exc:
            raise SpecError(f"bad sweep value {raw!r} for {param}: {exc}") from None
        report = run_benchmark(variant, workers, seed_offset)
        failures += report.failures
        for r in report.rows():
            lines.append(f"{param},{raw},{r.dataset},{r.method},{r.tau},{r.mean:.6g},{r.ci_half_width:.3g},"
                         f"{r.n_seeds}")
    text = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{param}.csv").write_text(text, encoding="utf-8")
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=1) + "\n", encoding="utf-8")
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="insite", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"insite {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "simulate train/val/test datasets per seed"),
        ("discover", "fit the per-regime population ODE from each seed's train split"),
        ("finetune", "fit per-patient constants on each test patient's history"),
        ("evaluate", "score methods on counterfactual plans and write the report"),
        ("report", "merge per-seed reports already on disk"),
        ("sweep", "rerun the benchmark over values of one spec field"),
        ("run", "generate, discover, finetune and evaluate in one go"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--spec", required=name != "report", help="experiment spec file (key = value lines)")
        p.add_argument("--out", help="output directory (default: spec output_dir)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--seed-offset", type=int, default=0)
        p.add_argument("--format", choices=("table", "long"), default="table")
        if name == "sweep":
            p.add_argument("--param", required=True, choices=sorted(SWEEPABLE))
            p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _fail(code: int, kind: str, message: str, out: Path | None) -> int:
    record = {"status": kind, "exit_code": code, "error": message}
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "failure.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out: Path | None = Path(args.out) if args.out else None
    try:
        spec = parse_spec(args.spec) if args.spec else None
        if out is None:
            if spec is None:
                raise SpecError("report needs --out or --spec")
            out = Path(spec.output_dir)
        if args.workers < 1:
            raise SpecError("--workers must be at least 1")
        seeds = _seeds(spec, args.seed_offset) if spec is not None else None
        report = None
        if args.command == "report":
            report = cmd_report(out, seeds)
            _write_report(report, out)
        elif args.command == "sweep":
            write_manifest(spec, out, seeds, "sweep")
            sys.stdout.write(cmd_sweep(spec, out, args.param, args.values.split(","), args.workers,
                                       args.seed_offset))
            return EXIT_OK
        else:
            write_manifest(spec, out, seeds, args.command)
            if args.command == "generate":
                cmd_generate(spec, out, seeds, args.workers)
            elif args.command == "discover":
                cmd_discover(spec, out, seeds, args.workers)
            elif args.command == "finetune":
                cmd_finetune(spec, out, seeds, args.workers)
            elif args.command == "evaluate":
                report = cmd_evaluate(spec, out, seeds, args.workers)
            elif args.command == "run":
                report = cmd_run(spec, out, seeds, args.workers)
        if report is not None:
            sys.stdout.write(report.to_table() if args.format == "table" else report.to_long())
            if report.failures:
                raise NumericFailure(f"{len(report.failures)} evaluation cells failed; see failures.json")
        return EXIT_OK
    except SpecError as exc:
        return _fail(EXIT_CONFIG, "config-error", str(exc), out)
    except (NumericFailure, DivergenceError, MissingRegimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, "numeric-failure", str(exc), out)
    except (OSError, DatasetFormatError) as exc:
        return _fail(EXIT_IO, "io-error", str(exc), out)


if __name__ == "__main__":
    sys.exit(main())

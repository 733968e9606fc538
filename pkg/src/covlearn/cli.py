"""Command-line driver: generate datasets, train, evaluate, export curves.

All files are JSON documents whose ``schema`` field names their format:

    covlearn.dataset-spec/1  DatasetSpec fields (generate input)
    covlearn.dataset/1       generated dataset (see covlearn.synth)
    covlearn.config/1        {"train": {...}, "baseline": {...}, "solver": {...}}
    covlearn.bounds/1        {"lower": {class: [3]}, "upper": {class: [3]}}
    covlearn.theta/1         {"theta": {class: [3]}}
    covlearn.report/1        training report; per-iteration table in
                             "columns"/"rows", wall_seconds is the only
                             time-dependent column

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 convergence failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import synth
from .baselines import METHODS as BASELINE_METHODS, ZeroOrderOptions, run_baseline
from .graph import Bounds, NoiseParams, ParameterDomainError, StructuralError
from .learner import LOOSE_BOUNDS, TIGHT_BOUNDS, TrainConfig, TrainReport, train
from .metrics import evaluate_dataset
from .solver import SolverOptions

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

SPEC_SCHEMA = "covlearn.dataset-spec/1"
CONFIG_SCHEMA = "covlearn.config/1"
BOUNDS_SCHEMA = "covlearn.bounds/1"
THETA_SCHEMA = "covlearn.theta/1"
REPORT_SCHEMA = "covlearn.report/1"
EVAL_SCHEMA = "covlearn.eval/1"

METHODS = ("ours",) + BASELINE_METHODS
TIMESTAMP_COLUMNS = ("wall_seconds",)
CURVE_COLUMNS = ("method", "dataset", "seed", "init_id", "wall_seconds", "iteration", "loss",
                 "train_rmse_transl", "train_rmse_rot")


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = EXIT_CONFIG


class DataError(CliError):
    code = EXIT_DATA


class ConvergenceFailure(CliError):
    code = EXIT_CONVERGENCE


def _dump(doc) -> str:
    return json.dumps(doc, indent=1) + "\n"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path, err=ConfigError, schema=None):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise err(f"no such file: {path}") from None
    except (OSError, ValueError) as exc:
        raise err(f"cannot read {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise err(f"{path}: expected a JSON object")
    if schema is not None and doc.get("schema") not in (schema, None):
        raise err(f"{path}: schema {doc.get('schema')!r}, expected {schema!r}")
    return doc


def _threads(args) -> int:
    raw = os.environ.get("COVLEARN_THREADS")
    value = raw if raw not in (None, "") else args.threads
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _build(cls, section: dict, what: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} settings: {exc}") from None


def load_config(path) -> dict:
    doc = _read_json(path, ConfigError, CONFIG_SCHEMA) if path else {}
    unknown = set(doc) - {"schema", "train", "baseline", "solver"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return {k: dict(doc.get(k, {})) for k in ("train", "baseline", "solver")}


def load_dataset(path) -> synth.Dataset:
    try:
        return synth.Dataset.load(path)
    except FileNotFoundError:
        raise DataError(f"no such dataset file: {path}") from None
    except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
        raise DataError(f"invalid dataset file {path}: {exc}") from None


def resolve_bounds(choice: str, classes) -> Bounds:
    if choice == "tight":
        return Bounds.uniform(classes, *TIGHT_BOUNDS)
    if choice == "loose":
        return Bounds.uniform(classes, *LOOSE_BOUNDS)
    doc = _read_json(choice, ConfigError, BOUNDS_SCHEMA)
    try:
        bounds = Bounds.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid bounds file {choice}: {exc}") from None
    if set(bounds.classes) != set(classes):
        raise ConfigError(f"bounds classes {list(bounds.classes)} do not match dataset {list(classes)}")
    return bounds


def load_theta(path, classes=None) -> tuple[NoiseParams, str]:
    """Read a theta file or a report; returns (theta, label)."""
    doc = _read_json(path, ConfigError)
    try:
        if doc.get("schema") == REPORT_SCHEMA:
            theta, label = NoiseParams(doc["theta_star"]), doc["method"]
        elif doc.get("schema") in (THETA_SCHEMA, None):
            theta, label = NoiseParams(doc["theta"]), Path(path).stem
        else:
            raise ConfigError(f"{path}: not a theta or report file")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid theta in {path}: {exc}") from None
    if classes is not None and set(theta.classes) != set(classes):
        raise ConfigError(f"{path}: classes {list(theta.classes)} do not match dataset {list(classes)}")
    return theta, label


def initial_theta(choice: str, dataset: synth.Dataset, bounds: Bounds, seed: int):
    """theta0 and its id. 'far' swaps the latent GPS/odometry levels inside the tight box."""
    latent = dataset.spec.latent_theta
    if choice == "far":
        return synth.far_initialization(latent, *TIGHT_BOUNDS), "far"
    if choice == "latent":
        return latent, "latent"
    if choice == "random":
        lower, upper = bounds.vectors(latent.classes)
        rng = np.random.default_rng(seed)
        vec = np.exp(rng.uniform(np.log(lower), np.log(upper)))
        return NoiseParams.from_vector(latent.classes, vec), f"random-{seed}"
    theta, _ = load_theta(choice, latent.classes)
    return theta, Path(choice).stem


# -- reports ------------------------------------------------------------------

def report_to_dict(report: TrainReport, meta: dict) -> dict:
    classes = list(report.classes)
    theta_cols = [f"theta[{c}][{k}]" for c in classes for k in range(3)]
    columns = ["iteration", "loss", "train_rmse_transl", "train_rmse_rot", "spread",
               "wall_seconds"] + theta_cols
    rows = [[r.iteration, r.loss, r.train_rmse_transl, r.train_rmse_rot, r.spread,
             r.wall_seconds] + list(r.theta) for r in report.records]
    spread = report.spread if report.theta_star is not None else None
    return {
        "schema": REPORT_SCHEMA,
        "method": report.method,
        **meta,
        "classes": classes,
        "theta_star": report.theta_star.to_dict() if report.theta_star is not None else None,
        "spread": spread,
        "spread_rounded": None if spread is None else int(round(spread)),
        "best_iteration": report.best_iteration,
        "status": report.status,
        "timestamp_columns": list(TIMESTAMP_COLUMNS),
        "columns": columns,
        "rows": rows,
    }


def read_report(path) -> dict:
    doc = _read_json(path, DataError, REPORT_SCHEMA)
    if doc.get("schema") != REPORT_SCHEMA:
        raise DataError(f"{path}: not a report file")
    for key in ("method", "columns", "rows"):
        if key not in doc:
            raise DataError(f"{path}: report lacks {key!r}")
    return doc


def strip_timestamps(doc: dict) -> dict:
    """Copy of a report without its time-dependent columns."""
    doc = json.loads(json.dumps(doc))
    keep = [i for i, c in enumerate(doc["columns"]) if c not in doc.get("timestamp_columns", [])]
    doc["columns"] = [doc["columns"][i] for i in keep]
    doc["rows"] = [[row[i] for i in keep] for row in doc["rows"]]
    return doc


# -- commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.dataset in synth.PRESET_LATENTS:
        spec_doc = {"dataset_id": args.dataset}
    else:
        spec_doc = _read_json(args.dataset, ConfigError, SPEC_SCHEMA)
        spec_doc.pop("schema", None)
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    try:
        spec = synth.DatasetSpec.from_dict(spec_doc)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid dataset spec: {exc}") from None
    out = Path(args.out or f"{spec.dataset_id}-seed{spec.seed}.json")
    synth.make_dataset(spec).save(out)
    print(f"{out} sha256={sha256_file(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.dataset)
    classes = dataset.spec.latent_theta.classes
    bounds = resolve_bounds(args.bounds, classes)
    seed = 0 if args.seed is None else args.seed
    theta0, init_id = initial_theta(args.init, dataset, bounds, seed)
    if not bounds.contains(theta0):
        raise ConfigError(f"initial theta ({init_id}) lies outside the bounds")
    solver_opts = _build(SolverOptions, cfg["solver"], "solver")
    threads = _threads(args)
    if args.method == "ours":
        config = _build(TrainConfig, cfg["train"], "train",
                        bounds=bounds, threads=threads, solver=solver_opts)
        report = train(dataset.train, theta0, config)
        settings = {k: v for k, v in asdict(config).items() if k not in ("bounds", "solver")}
    else:
        opts = _build(ZeroOrderOptions, cfg["baseline"], "baseline",
                      method=args.method, bounds=bounds)
        report = run_baseline(dataset.train, theta0, opts, solver_opts=solver_opts)
        settings = {k: v for k, v in asdict(opts).items() if k != "bounds"}
    settings.pop("threads", None)  # does not affect results
    meta = {
        "dataset": {"id": dataset.spec.dataset_id, "seed": dataset.spec.seed,
                    "sha256": sha256_file(args.dataset)},
        "seed": seed,
        "init_id": init_id,
        "theta0": theta0.to_dict(),
        "bounds": bounds.to_dict(),
        "config": {"settings": settings, "solver": asdict(solver_opts)},
    }
    out = Path(args.out or f"report-{args.method}.json")
    out.write_text(_dump(report_to_dict(report, meta)))
    print(f"{out} status={report.status} iterations={len(report.records)} "
          f"spread={report.spread:.0f}" if report.theta_star is not None else f"{out} status={report.status}")
    if report.status == "aborted":
        raise ConvergenceFailure("training aborted: an inner solve did not converge")
    return EXIT_OK


def _unique(labels):
    seen, out = {}, []
    for lab in labels:
        seen[lab] = seen.get(lab, 0) + 1
        out.append(lab if seen[lab] == 1 else f"{lab}-{seen[lab]}")
    return out


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.dataset)
    classes = dataset.spec.latent_theta.classes
    solver_opts = _build(SolverOptions, cfg["solver"], "solver")
    columns = []
    first_report = None
    for path in args.theta:
        theta, label = load_theta(path, classes)
        columns.append((label, theta))
        doc = _read_json(path, ConfigError)
        if first_report is None and doc.get("schema") == REPORT_SCHEMA:
            first_report = doc
    if args.initial is not None:
        theta0, _ = initial_theta(args.initial, dataset, Bounds.uniform(classes, *LOOSE_BOUNDS), 0)
        columns.insert(0, ("Initial", theta0))
    elif first_report is not None and first_report.get("theta0"):
        columns.insert(0, ("Initial", load_theta_dict(first_report["theta0"], classes)))
    if not columns:
        raise ConfigError("nothing to evaluate: pass --theta files or --initial")
    labels = _unique([c[0] for c in columns])
    results = {}
    for label, (_, theta) in zip(labels, columns):
        res = evaluate_dataset(theta, dataset.test, solver_opts)
        results[label] = {"transl": res.transl, "rot": res.rot,
                          "converged": int(sum(res.converged)), "n": len(res.converged)}
    print(format_table(dataset.spec.dataset_id, labels, results))
    if args.out:
        Path(args.out).write_text(_dump({"schema": EVAL_SCHEMA, "dataset": dataset.spec.dataset_id,
                                         "columns": labels, "results": results}))
    return EXIT_OK


def load_theta_dict(d, classes) -> NoiseParams:
    theta = NoiseParams(d)
    if set(theta.classes) != set(classes):
        raise ConfigError("report theta0 classes do not match the dataset")
    return theta


def format_table(dataset_id: str, labels, results) -> str:
    """One row per dataset, a (transl, rot) column pair per theta."""
    head1 = ["dataset"] + [lab for lab in labels for _ in (0, 1)]
    head2 = [""] + ["transl", "rot"] * len(labels)
    row = [dataset_id] + [f"{results[lab][k]:.4f}" for lab in labels for k in ("transl", "rot")]
    width = max(8, max(len(s) for s in head1 + row) + 2)
    fmt = lambda cells: "".join(c.ljust(width) for c in cells).rstrip()
    return "\n".join([fmt(head1), fmt(head2), fmt(row)])


def curve_rows(doc: dict) -> list:
    cols = doc["columns"]
    idx = {c: cols.index(c) for c in ("iteration", "loss", "train_rmse_transl",
                                      "train_rmse_rot", "wall_seconds")}
    ds = doc.get("dataset", {})
    rows = []
    for r in doc["rows"]:
        rows.append({
            "method": doc["method"], "dataset": ds.get("id", ""), "seed": doc.get("seed", ""),
            "init_id": doc.get("init_id", ""),
            **{k: r[i] for k, i in idx.items()},
        })
    return rows


def cmd_curves(args) -> int:
    if not args.reports:
        raise ConfigError("curves needs at least one report file")
    rows = []
    for path in args.reports:
        doc = read_report(path)
        try:
            rows.extend(curve_rows(doc))
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: malformed iteration table: {exc}") from None
    out = Path(args.out or "curves.csv")
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"{out} rows={len(rows)}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="covlearn", description="Learn factor-graph noise models on synthetic navigation data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--dataset", required=True, help="preset id (D1..D4) or dataset-spec file")
    g.add_argument("--seed", type=int, help="override the dataset-spec seed")
    g.add_argument("--out", help="output dataset file")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="learn noise parameters")
    t.add_argument("--dataset", required=True, help="dataset file")
    t.add_argument("--method", choices=METHODS, default="ours")
    t.add_argument("--bounds", default="tight", help="loose | tight | bounds file")
    t.add_argument("--init", default="far", help="far | latent | random | theta file")
    t.add_argument("--seed", type=int, help="seed for --init random (recorded in the report)")
    t.add_argument("--config", help="config file")
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--out", help="output report file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-split RMSE table")
    e.add_argument("--dataset", required=True, help="dataset file")
    e.add_argument("--theta", nargs="*", default=[], help="report or theta files")
    e.add_argument("--initial", help="far | latent | theta file (default: theta0 of the first report)")
    e.add_argument("--config", help="config file (solver section)")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--out", help="also write the table as JSON")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="merge reports into long-format CSV")
    c.add_argument("reports", nargs="*", help="report files")
    c.add_argument("--out", help="output CSV file")
    c.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"covlearn: error: {exc}", file=sys.stderr)
        return exc.code
    except (ParameterDomainError, StructuralError) as exc:
        code = EXIT_CONFIG if isinstance(exc, ParameterDomainError) else EXIT_DATA
        print(f"covlearn: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

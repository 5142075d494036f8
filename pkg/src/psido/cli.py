"""Command line: ``psido run <config>``, ``psido list``, ``psido grid-info <file>``.

Exit codes: 0 all criteria pass, 1 a criterion failed, 2 the config or
input file could not be parsed, 3 a numerical error stopped the run.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads() -> None:
    # must run before numpy is imported
    n = os.environ.get("PSIDO_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, n)


_cap_threads()

import csv
import datetime
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as X
from .quantize import GridError, read_grid_header
from .symbols import SymbolParseError

EXIT_PASS, EXIT_FAIL, EXIT_PARSE, EXIT_NUMERIC = 0, 1, 2, 3


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, (complex, np.complexfloating)):
        return [float(v.real), float(v.imag)]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def build_report(cfg: dict, result: X.ExperimentResult, timestamp: str | None = None) -> dict:
    return _jsonable({
        "version": __version__,
        "experiment": result.experiment,
        "check": result.check,
        "seed": cfg["seed"],
        "config": cfg,
        "passed": result.passed,
        "criteria": [c.to_dict() for c in result.criteria],
        "measurements": result.measurements,
        "constants": result.constants,
        "tables": sorted(result.tables),
        "plots": sorted(result.plots),
        "timestamp": timestamp,
    })


def write_artifacts(out: Path, cfg: dict, result: X.ExperimentResult,
                    timestamp: str | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    for name, (header, rows) in result.tables.items():
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(_jsonable(rows))
    for name, (xlabel, ylabel, xs, ys) in result.plots.items():
        with open(out / f"plot_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"])
            w.writerows(zip(_jsonable(list(xs)), _jsonable(list(ys))))
        with open(out / f"plot_{name}.meta.json", "w") as fh:
            json.dump({"x": xlabel, "y": ylabel}, fh, sort_keys=True)
    path = out / "report.json"
    with open(path, "w") as fh:
        fh.write(json.dumps(build_report(cfg, result, timestamp), sort_keys=True, indent=2))
        fh.write("\n")
    return path


def cmd_run(args) -> int:
    try:
        cfg = X.load_config(args.config)
    except (OSError, X.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    out = Path(args.output_dir or cfg.get("output_dir") or
               Path("results") / Path(args.config).stem)
    try:
        result = X.run_experiment(cfg)
    except (X.ConfigError, SymbolParseError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    path = write_artifacts(out, cfg, result, stamp)
    for line in result.lines():
        print(line)
    print(f"report: {path}")
    return EXIT_PASS if result.passed else EXIT_FAIL


def cmd_list(args) -> int:
    sys.stdout.write(X.catalog_text())
    return EXIT_PASS


def cmd_grid_info(args) -> int:
    try:
        with open(args.gridfile, "rb") as fh:
            head = read_grid_header(fh)
            payload = len(fh.read())
    except (OSError, GridError, struct.error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    expected = head["n_r"] * int(np.prod(head["n_theta"])) * 16
    head["samples"] = payload // 16
    head["complete"] = payload == expected
    print(json.dumps(head, sort_keys=True))
    return EXIT_PASS if head["complete"] else EXIT_PARSE


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psido", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None)
    r.set_defaults(func=cmd_run)
    sub.add_parser("list", help="print the experiment catalog").set_defaults(func=cmd_list)
    g = sub.add_parser("grid-info", help="describe a binary grid-function file")
    g.add_argument("gridfile")
    g.set_defaults(func=cmd_grid_info)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

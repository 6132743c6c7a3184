"""Command-line front end.

    homoglab calibrate --config run.yaml --out results
    homoglab run <suite|all> --config run.yaml --out results
    homoglab report results

Exit codes: 0 all gated criteria pass, 1 a gated criterion fails,
2 configuration error (including a missing calibration or too few seeds
or eps values for a fit), 3 runtime or
solver error (including checksum mismatches in cached fields).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .calculus import SolverError
from .config import SUITES, RunConfig, load_config
from .correctors import HierarchyError
from .fluctuations import EnsembleError, InsufficientSamplesError
from .gaussian_field import ConfigError, EllipticityError
from .io import ChecksumError, FieldCache, manifest, read_csv, write_csv, write_json
from .suites import (NEEDS_CALIBRATION, CalibrationCache, CalibrationStore, MissingCalibrationError,
                     run_suite)

log = logging.getLogger("homoglab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

SCALING_HEADER = ["observable", "statistic", "eps", "value", "stderr"]
QQ_HEADER = ["observable", "k", "theoretical", "sample"]
REFINEMENT_HEADER = ["residual", "map", "N", "h", "value"]


def _seed_range(text: str) -> tuple[int, int]:
    """``START:STOP`` (half-open) to ``(start, count)``."""
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must look like START:STOP, got {text!r}") from None
    if b <= a or a < 0:
        raise argparse.ArgumentTypeError(f"empty or negative seed range {text!r}")
    return a, b - a


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homoglab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration (defaults if omitted)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seeds", type=_seed_range, help="evaluation seeds START:STOP")
        sp.add_argument("--threads", type=int, help="worker processes for seed loops")
        sp.add_argument("--tol", type=float, help="relative solver tolerance")

    cal = sub.add_parser("calibrate", help="build and persist ensemble effective tensors")
    common(cal)
    cal.add_argument("--order", type=int, default=2, help="highest tensor order (default 2)")
    run = sub.add_parser("run", help="run one suite (or all configured suites)")
    run.add_argument("suite", choices=list(SUITES) + ["all"])
    common(run)
    rep = sub.add_parser("report", help="emit plot-ready CSV bundles from a result directory")
    rep.add_argument("results", help="directory written by `homoglab run`")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else load_config()
    return cfg.with_overrides(seeds=args.seeds, threads=args.threads, tol=args.tol, output=args.out)


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    store = CalibrationStore(out / "calibration")
    cache = CalibrationCache(cfg.seeds("calibration_seeds"), args.order, cfg.threads, store)
    for eps in cfg.eps_list:
        ec = cfg.ensemble_config(eps)
        cal = cache(ec)
        print(f"eps={eps:g} N={ec.grid.N}: calibration {cal.id} -> {store.path(ec)}")
        print(f"  abar1 = {cal.tensors[1].entries.tolist()} (stderr {cal.tensors[1].stderr.tolist()})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    suites = cfg.suites if args.suite == "all" else [args.suite]
    cache = FieldCache.from_env()
    store = CalibrationStore(out / "calibration")
    any_fail = False
    table = []
    for name in suites:
        cals = store if name in NEEDS_CALIBRATION else None
        res = run_suite(name, cfg, calibrations=cals, field_cache=cache)
        d = out / name
        files = []
        for tname, rows in res.tables.items():
            if rows:
                files.append(write_csv(d / f"{tname}.csv", rows))
        files.append(write_csv(d / "criteria.csv",
                               [{"criterion": c.key, "name": c.name, "passed": c.passed,
                                 "runtime": c.runtime, "summary": c.summary} for c in res.criteria]))
        summary = res.summary()
        summary.update({"config_sha256": cfg.digest, "config": cfg.data})
        files.append(write_json(d / "summary.json", summary))
        write_json(d / "manifest.json", {"config_sha256": cfg.digest, "files": manifest(files, out)})
        for c in res.criteria:
            table.append(c.line())
        any_fail |= not res.passed
    print("\n".join(table))
    return EXIT_FAIL if any_fail else EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.results)
    summaries = sorted(root.glob("*/summary.json"))
    if not summaries:
        raise ConfigError(f"no results under {root}")
    series = {"scaling": [], "qq": [], "refinement": []}
    for p in summaries:
        for key, rows in json.loads(p.read_text()).get("series", {}).items():
            if key in series:
                series[key].extend(rows)
    headers = {"scaling": SCALING_HEADER, "qq": QQ_HEADER, "refinement": REFINEMENT_HEADER}
    out = root / "report"
    for key, rows in series.items():
        if not rows:
            log.warning("no %s data in %s; skipped", key, root)
            print(f"skipped {key}: no data")
            continue
        path = write_csv(out / f"{key}.csv", rows, headers[key])
        print(f"wrote {path} ({len(read_csv(path))} rows)")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"calibrate": cmd_calibrate, "run": cmd_run, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (ConfigError, MissingCalibrationError, InsufficientSamplesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChecksumError, SolverError, HierarchyError, EllipticityError, EnsembleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

    subnet-tune run       --config exp.json --out results/
    subnet-tune sweep     --config sweep.json --out sweep/ --threads 4
    subnet-tune compare   results/a results/b
    subnet-tune report    results/a
    subnet-tune gradcheck --seed 3

Exit codes: 0 on success, 1 when the work itself could not be done
(I/O failure, failed gradient check), 2 on usage errors. Aborted training
runs are recorded in the report and do not change the exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    AggregateReport,
    ExperimentConfig,
    aggregate,
    default_benchmark,
    pretrain_then_snapshot,
    run_experiment,
)
from .net import Batch, build_mlp, gradient_check
from .strategies import DPS_KINDS, KINDS, StrategyConfig
from .tensor import make_rng

log = logging.getLogger("subnet_tune")

THREADS_ENV = "SUBNET_TUNE_THREADS"


class UsageError(Exception):
    """Bad arguments or a bad config file; reported with exit code 2."""


# ---------------------------------------------------------------- config


def load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return data


def experiment_from_dict(d: dict, where: str) -> ExperimentConfig:
    """Overlay ``d`` on the built-in default benchmark."""
    base = default_benchmark().to_dict()
    unknown = set(d) - set(base)
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    merged = {**base, **d}
    try:
        return ExperimentConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from None


def apply_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    """``--seed s`` keeps the number of seeds but renumbers them from ``s``;
    pretraining is reseeded too."""
    if seed is None:
        return cfg
    cfg.seeds = [seed + i for i in range(len(cfg.seeds))]
    cfg.pretrain.seed = seed
    return cfg


def resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={env!r} is not an integer") from None
    if value < 1:
        raise UsageError(f"thread count must be at least 1, got {value}")
    return value


def prepare_out(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def attach_log_file(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("subnet_tune").addHandler(handler)
    return handler


def write_manifest(out: Path, args, config: dict, extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "threads": args.threads,
        "seeds": config.get("seeds"),
        "config": config,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def print_rows(rows, stream=None) -> None:
    stream = stream or sys.stdout
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        stream.write("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")


def print_report(rep: AggregateReport) -> None:
    for title, rows in (("scores (mean std)", rep.score_table("score")),
                        ("out-of-domain (mean std)", rep.score_table("ood")),
                        ("timing", rep.timing_table())):
        print(f"\n{title}")
        print_rows(rows)


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    cfg = experiment_from_dict(load_json(args.config), args.config) if args.config else default_benchmark()
    cfg = apply_seed(cfg, args.seed)
    out = prepare_out(args.out, args.force)
    handler = attach_log_file(out)
    try:
        write_manifest(out, args, cfg.to_dict(), {"config_path": args.config})
        log.info("running %d jobs on %d worker(s)",
                 len(cfg.tasks) * len(cfg.sizes) * len(cfg.seeds) * len(cfg.strategies), args.threads)
        t0 = time.perf_counter()
        rep = run_experiment(cfg, threads=args.threads)
        log.info("finished in %.1fs", time.perf_counter() - t0)
        rep.save(out / "report.json")
        rep.write_tables(out / "tables")
    finally:
        logging.getLogger("subnet_tune").removeHandler(handler)
        handler.close()
    print_report(rep)
    print(f"\nwrote {out}")
    return 0


def sweep_strategies(grid: dict) -> list[StrategyConfig]:
    """Cartesian product of kind x p x ur. ``ur`` only matters for the DPS
    kinds and ``p`` not at all for vanilla, so those axes collapse."""
    kinds = grid.get("strategies") or []
    ps = grid.get("p") or []
    urs = grid.get("ur") or []
    if not kinds:
        raise UsageError("sweep grid has no strategies")
    for k in kinds:
        if k not in KINDS:
            raise UsageError(f"unknown strategy kind {k!r} in sweep grid; expected one of {list(KINDS)}")
    cells, seen = [], set()
    for kind in kinds:
        if kind == "vanilla":
            combos = [(0.0, 0.1)]
        elif kind in DPS_KINDS:
            if not ps or not urs:
                raise UsageError(f"sweep grid for {kind} needs non-empty 'p' and 'ur' lists")
            combos = [(p, ur) for p in ps for ur in urs]
        else:
            if not ps:
                raise UsageError(f"sweep grid for {kind} needs a non-empty 'p' list")
            combos = [(p, 0.1) for p in ps]
        for p, ur in combos:
            try:
                s = StrategyConfig(kind, p=p, ur=ur,
                                   penalty_boundary=grid.get("penalty_boundary", 50),
                                   accumulate=grid.get("accumulate", "squared"))
            except ValueError as exc:
                raise UsageError(f"sweep grid: {exc}") from None
            if s.name not in seen:
                seen.add(s.name)
                cells.append(s)
    return cells


def _quartiles(values: list[float]) -> list[str]:
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return [f"{v:.6f}" for v in q]


def write_sweep_tables(out: Path, cells: list[StrategyConfig], baseline: str, rep: AggregateReport) -> None:
    tables = out / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    by_label = {s.name: s for s in cells}
    with open(tables / "sweep_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "kind", "p", "ur", "task", "size", "seed", "score", "ood_score", "aborted"])
        for r in rep.records:
            s = by_label.get(r.strategy) or StrategyConfig("vanilla")
            w.writerow([r.strategy, s.kind, s.p, s.ur, r.task, r.size, r.seed,
                        "" if r.score is None else repr(r.score),
                        "" if r.ood_score is None else repr(r.ood_score), int(r.aborted)])
    # per-p spread of seed scores, for box plots outside this tool
    with open(tables / "per_p_distribution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "p", "ur", "task", "size", "n", "min", "q1", "median", "q3", "max",
                    "vanilla_median"])
        for task, size in rep.columns:
            base = [r.score for r in rep.records
                    if (r.strategy, r.task, r.size) == (baseline, task, size) and not r.aborted]
            base_med = f"{np.median(base):.6f}" if base else ""
            for s in cells:
                scores = [r.score for r in rep.records
                          if (r.strategy, r.task, r.size) == (s.name, task, size) and not r.aborted]
                if not scores:
                    continue
                w.writerow([s.kind, s.p, s.ur if s.kind in DPS_KINDS else "", task, size, len(scores),
                            *_quartiles(scores), base_med])
    with open(tables / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "kind", "p", "ur", "mean", "std", "delta_mean", "delta_std",
                    "failed_run", "time_ratio"])
        v = rep.averages[baseline]["score"]
        for label in rep.strategies:
            s = by_label.get(label) or StrategyConfig("vanilla")
            a = rep.averages[label]
            sc = a["score"]
            w.writerow([label, s.kind, s.p, s.ur if s.kind in DPS_KINDS else "",
                        _num(sc["mean"]), _num(sc["std"]),
                        _num(None if sc["mean"] is None else sc["mean"] - v["mean"]),
                        _num(None if sc["std"] is None else sc["std"] - v["std"]),
                        "" if a["failed_run"] is None else str(a["failed_run"]).lower(),
                        "" if a["time_ratio"] is None else f"{a['time_ratio']:.4f}"])


def _num(x) -> str:
    return "" if x is None else f"{x:.6f}"


def cmd_sweep(args) -> int:
    raw = load_json(args.config)
    if "grid" not in raw:
        raise UsageError(f"{args.config}: a sweep config needs a 'grid' object")
    grid = raw.pop("grid")
    if not isinstance(grid, dict):
        raise UsageError(f"{args.config}: 'grid' must be an object")
    cells = sweep_strategies(grid)
    raw.pop("strategies", None)
    cfg = experiment_from_dict(raw, args.config)
    baseline = StrategyConfig("vanilla")
    strategies = [baseline] + [s for s in cells if s.name != baseline.name]
    cfg = apply_seed(replace(cfg, strategies=strategies), args.seed)
    out = prepare_out(args.out, args.force)
    handler = attach_log_file(out)
    try:
        write_manifest(out, args, cfg.to_dict(),
                       {"config_path": args.config, "grid": grid, "cells": [s.name for s in cells]})
        log.info("sweep: %d cells plus the vanilla baseline", len(cells))
        pretrained = pretrain_then_snapshot(cfg.model, cfg.pretrain)
        rep = run_experiment(cfg, threads=args.threads, pretrained=pretrained)
        rep.save(out / "report.json")
        rep.write_tables(out / "tables")
        # one report per cell, each carrying the shared vanilla baseline
        for s in cells:
            sub = replace(cfg, strategies=[baseline] if s.name == baseline.name else [baseline, s])
            keep = set(sub.labels)
            cell_rep = aggregate(sub, [r for r in rep.records if r.strategy in keep])
            cell_dir = out / "cells" / _slug(s.name)
            cell_dir.mkdir(parents=True, exist_ok=True)
            cell_rep.save(cell_dir / "report.json")
        write_sweep_tables(out, strategies, baseline.name, rep)
        aborted = sum(r.aborted for r in rep.records)
        if aborted:
            log.warning("%d of %d runs aborted", aborted, len(rep.records))
    finally:
        logging.getLogger("subnet_tune").removeHandler(handler)
        handler.close()
    print(f"sweep over {len(cells)} cells")
    print_report(rep)
    print(f"\nwrote {out}")
    return 0


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name).strip("_")


def load_report(path: str | Path) -> AggregateReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.is_file():
        raise UsageError(f"report not found: {path}")
    try:
        return AggregateReport.load(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: not a report file ({exc})") from None


def compare_rows(reports: list[tuple[str, AggregateReport]]) -> tuple[list[list[str]], list[list[str]]]:
    """Side-by-side score and timing tables; deltas are against vanilla when
    any report has it, otherwise against the first strategy listed."""
    cols = reports[0][1].columns
    mismatches = []
    for name, rep in reports[1:]:
        if set(rep.columns) != set(cols):
            missing = sorted(set(cols) - set(rep.columns))
            extra = sorted(set(rep.columns) - set(cols))
            mismatches.append(f"{name}: missing {missing}, extra {extra}")
    if mismatches:
        raise UsageError("reports cover different task/size sets:\n  " + "\n  ".join(mismatches))

    entries = []  # (label, report)
    for name, rep in reports:
        for strat in rep.strategies:
            label = strat if all(strat != e[0] for e in entries) else f"{strat} [{name}]"
            entries.append((label, strat, rep))
    base = next((e for e in entries if e[1] == "vanilla"), entries[0])
    bl, bs, brep = base

    header = ["method"] + [f"{t}@{s}" for t, s in cols] + ["d_mean", "d_std"]
    scores = [header]
    for label, strat, rep in entries:
        row = [label]
        dm, ds = [], []
        for t, s in cols:
            st = rep.cell(strat, t, s)["score"]
            b = brep.cell(bs, t, s)["score"]
            scale = 100.0 if rep._metric(t) in ("accuracy", "mcc") else 1.0
            if st["mean"] is None:
                row.append("-")
                continue
            row.append(f"{st['mean'] * scale:.2f} {st['std'] * scale:.2f}")
            if b["mean"] is not None:
                dm.append((st["mean"] - b["mean"]) * scale)
                ds.append((st["std"] - b["std"]) * scale)
        row.append(f"{np.mean(dm):+.2f}" if dm else "-")
        row.append(f"{np.mean(ds):+.2f}" if ds else "-")
        scores.append(row)

    timing = [["method", "time_ratio", "mean_seconds"]]
    base_time = brep.averages[bs]["mean_time"]
    for label, strat, rep in entries:
        t = rep.averages[strat]["mean_time"]
        ratio = "-" if not base_time else f"x{t / base_time:.2f}"
        timing.append([label, ratio, f"{t:.4f}"])
    return scores, timing


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two reports")
    reports = [(str(p), load_report(p)) for p in args.reports]
    scores, timing = compare_rows(reports)
    print("scores (mean std; deltas averaged over columns, against the baseline)")
    print_rows(scores)
    print("\ntiming")
    print_rows(timing)
    if args.out:
        out = prepare_out(args.out, args.force)
        for name, rows in (("compare_scores", scores), ("compare_timing", timing)):
            with open(out / f"{name}.csv", "w", newline="") as fh:
                csv.writer(fh).writerows(rows)
    return 0


def cmd_report(args) -> int:
    rep = load_report(args.path)
    print_report(rep)
    print("\ncases")
    print_rows(rep.case_table())
    if args.out:
        out = prepare_out(args.out, args.force)
        rep.write_tables(out)
    return 0


def cmd_gradcheck(args) -> int:
    rng = make_rng(0 if args.seed is None else args.seed)
    worst, failed = 0.0, 0
    for i in range(args.archs):
        in_dim = int(rng.integers(2, 7))
        hidden = [int(h) for h in rng.integers(2, 9, size=rng.integers(1, 4))]
        act = str(rng.choice(["tanh", "relu"]))
        for head in ("classification", "regression"):
            out_dim = int(rng.integers(2, 5)) if head == "classification" else 1
            model = build_mlp(in_dim, hidden, out_dim, rng, act, head)
            # zero biases behind dead relu units put pre-activations exactly on the kink
            for layer in model.layers:
                layer.bias.value = rng.normal(scale=0.5, size=layer.bias.shape)
            x = rng.normal(size=(int(rng.integers(1, 9)), in_dim))
            y = rng.integers(0, out_dim, len(x)) if head == "classification" else rng.normal(size=len(x))
            rep = gradient_check(model, Batch(x, y), h=args.h, tol=args.tol)
            worst = max(worst, rep.max_error)
            status = "ok" if rep.passed else "FAIL " + ",".join(rep.failed)
            print(f"{i:3d} {head:14s} {in_dim}-{'-'.join(map(str, hidden))}-{out_dim} {act:4s} "
                  f"max_err={rep.max_error:.2e} {status}")
            failed += not rep.passed
    print(f"\n{2 * args.archs - failed}/{2 * args.archs} passed, worst error {worst:.2e} (tol {args.tol:g})")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subnet-tune", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker processes (default: ${THREADS_ENV} or 1)")
        p.add_argument("--seed", type=int, default=None, help="renumber seeds starting here")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = sub.add_parser("run", help="run one multi-seed experiment")
    p.add_argument("--config", help="experiment JSON (default: built-in benchmark)")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a strategy x p x ur grid")
    p.add_argument("--config", required=True, help="sweep JSON with a 'grid' object")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="side-by-side tables for two or more reports")
    p.add_argument("reports", nargs="+", help="report.json files or run directories")
    common(p, out_required=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="print the tables of a saved report")
    p.add_argument("path", help="report.json or a run directory")
    common(p, out_required=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check on random networks")
    p.add_argument("--archs", type=int, default=20, help="random architectures per loss type")
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.threads = resolve_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{parser.prog} {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

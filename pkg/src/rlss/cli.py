"""Command line entry point: ``rlss run``, ``rlss validate`` and ``rlss recount``.

Exit status is 0 when every run completed (collisions are reported, not
fatal), 1 for invalid arguments or scenarios, and 2 for runtime failures
such as an unwritable output directory.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .replan import Strategy
from .scenario import ScenarioError, parse_scenario
from .sim import SAMPLE_PERIOD, run
from .tracefile import recount_metrics, write_iterations, write_plot_data, write_trace

log = logging.getLogger("rlss")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

SWEEP_COLUMNS = ("run", "robots", "cell_size", "cells", "obstacles", "strategy", "collisions",
                 "robot_collisions", "obstacle_collisions", "deadlocks", "goals_reached",
                 "total_distance", "max_ms", "avg_ms", "iterations", "soft_iterations",
                 "end_time", "hit_cap")


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        out = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("robot counts must be positive")
    return out


def _float_list(text):
    try:
        out = [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not out or min(out) <= 0:
        raise argparse.ArgumentTypeError("cell sizes must be positive")
    return out


def _positive(text):
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rlss", description="Multi-robot receding-horizon replanning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a scenario (or a sweep) and write traces and metrics")
    r.add_argument("scenario", type=Path)
    r.add_argument("-o", "--output", type=Path, required=True, help="output directory")
    r.add_argument("--strategy", choices=[s.value for s in Strategy])
    r.add_argument("--cap", type=_positive, help="simulation duration cap in seconds")
    r.add_argument("--robots", type=_int_list, help="sweep over robot counts, e.g. 6,12,24")
    r.add_argument("--cell-size", type=_float_list, help="sweep over grid cell sizes, e.g. 0.5,0.25")
    r.add_argument("--sample-period", type=_positive, default=SAMPLE_PERIOD,
                   help="trace and collision sampling period in seconds (default 0.01)")
    r.add_argument("--plot-data", action="store_true", help="also write per-robot position CSVs")
    r.add_argument("-j", "--jobs", type=int, default=1, help="run sweep entries in parallel")

    v = sub.add_parser("validate", help="parse a scenario and print its resolved settings")
    v.add_argument("scenario", type=Path)

    c = sub.add_parser("recount", help="recompute metrics from a run directory")
    c.add_argument("scenario", type=Path)
    c.add_argument("run_dir", type=Path)
    return p


def _load(path, strategy=None, cap=None, robots=None, cell_size=None):
    scn = parse_scenario(path, robots_override=robots, cell_size_override=cell_size)
    if strategy is not None:
        scn.strategy = Strategy(strategy)
        scn.meta["strategy"] = scn.strategy.value
    if cap is not None:
        scn.duration_cap = cap
        scn.meta["duration_cap"] = cap
    return scn


def _run_name(scn, robots, cell_size, sweep):
    if not sweep:
        return scn.name
    parts = [scn.name]
    if robots is not None:
        parts.append(f"n{robots}")
    if cell_size is not None:
        parts.append(f"c{cell_size:g}")
    return "_".join(parts)


def run_one(path, out_root, strategy, cap, robots, cell_size, sample_period, plot_data, sweep):
    """Simulate one scenario variant and write its files; returns a sweep table row."""
    scn = _load(path, strategy, cap, robots, cell_size)
    name = _run_name(scn, robots, cell_size, sweep)
    out = Path(out_root) / name if sweep else Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %s (%d robots)", name, len(scn.robots))
    metrics, trace = run(scn, sample_period)
    write_trace(out / "trace.csv", trace, {"scenario": scn.meta})
    write_iterations(out / "iterations.csv", trace.records)
    if plot_data:
        write_plot_data(out, trace)
    summary = metrics.summary()
    summary["per_robot"] = {"max_ms": metrics.max_ms, "avg_ms": metrics.avg_ms,
                            "goal_reached": metrics.goal_reached, "deadlocked": metrics.deadlocked}
    with open(out / "metrics.json", "w") as f:
        json.dump({"scenario": scn.meta, "metrics": summary}, f, indent=2, sort_keys=True)
    g = scn.meta["grid"]
    return {"run": name, "robots": len(scn.robots), "cell_size": g["cell_size"],
            "cells": g["cells"], "obstacles": g["obstacles"], "strategy": scn.strategy.value,
            **{k: summary[k] for k in SWEEP_COLUMNS if k in summary}}


def _cmd_run(args) -> int:
    robots = args.robots or [None]
    cells = args.cell_size or [None]
    sweep = args.robots is not None or args.cell_size is not None
    # validate every variant before spending time on any run
    for n, cs in itertools.product(robots, cells):
        _load(args.scenario, args.strategy, args.cap, n, cs)
    try:
        args.output.mkdir(parents=True, exist_ok=True)
        probe = args.output / ".write-test"
        probe.touch()
        probe.unlink()
    except OSError as e:
        print(f"rlss: cannot write to {args.output}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    jobs = [(args.scenario, args.output, args.strategy, args.cap, n, cs, args.sample_period,
             args.plot_data, sweep) for n, cs in itertools.product(robots, cells)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(run_one, *zip(*jobs)))
    else:
        rows = [run_one(*j) for j in jobs]
    with open(args.output / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(f"{row['run']}: collisions={row['collisions']} deadlocks={row['deadlocks']} "
              f"distance={row['total_distance']:.2f} avg_ms={row['avg_ms']:.1f} "
              f"max_ms={row['max_ms']:.1f}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    scn = _load(args.scenario)
    print(json.dumps(scn.meta, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_recount(args) -> int:
    scn = _load(args.scenario)
    shapes = [r.config.shape for r in scn.robots]
    m = recount_metrics(args.run_dir / "trace.csv", args.run_dir / "iterations.csv", shapes, scn.grid)
    print(json.dumps(m.summary(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    cmd = {"run": _cmd_run, "validate": _cmd_validate, "recount": _cmd_recount}[args.command]
    try:
        return cmd(args)
    except (ScenarioError, FileNotFoundError) as e:
        print(f"rlss: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any failure during a run is a runtime failure
        log.debug("run failed", exc_info=True)
        print(f"rlss: run failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

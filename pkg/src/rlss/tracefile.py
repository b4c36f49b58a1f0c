"""Text trace files and the metrics recount that reads them back.

A trace is a CSV document with two leading comment lines: the schema tag
``# rlss-trace v1`` and ``# `` followed by a JSON object of run metadata.
Rows are sorted by time, then robot id. Floats are written with 17
significant digits so a recount reproduces the in-memory metrics exactly.
The companion ``iterations.csv`` holds one row per planning iteration.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .sim import IterationRecord, RunMetrics, Trace, compute_metrics

TRACE_SCHEMA = "rlss-trace v1"
ITERATION_FIELDS = ("step", "robot", "ok", "failed_stage", "soft_used", "rescales",
                    "hard_failures", "skipped", "elapsed_ms")
AXES = "xyz"


def _g(x) -> str:
    return "%.17g" % x


def trace_columns(dim: int) -> list[str]:
    axes = list(AXES[:dim]) if dim <= 3 else [f"p{k}" for k in range(dim)]
    return ["time", "robot", *axes, "failed_stage", "soft_used", "rescales"]


def write_trace(path, trace: Trace, meta: dict | None = None):
    """Write the sampled positions and per-sample iteration flags."""
    S, n, d = trace.positions.shape
    head = {"dt": trace.dt, "sample_period": trace.sample_period, "end_time": trace.end_time,
            "hit_cap": trace.hit_cap, "robots": n, "dim": d, "goals": trace.goals.tolist(),
            **(meta or {})}
    with open(path, "w", newline="") as f:
        f.write(f"# {TRACE_SCHEMA}\n# {json.dumps(head, sort_keys=True)}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(trace_columns(d))
        for k in range(S):
            t = _g(trace.times[k])
            for i in range(n):
                w.writerow([t, i, *map(_g, trace.positions[k, i]), trace.failed_stage[k, i] or "-",
                            int(trace.soft_used[k, i]), int(trace.rescales[k, i])])


def write_iterations(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ITERATION_FIELDS)
        for r in records:
            w.writerow([r.step, r.robot, int(r.ok), r.failed_stage or "-", int(r.soft_used),
                        r.rescales, r.hard_failures, r.skipped, _g(r.elapsed_ms)])


def write_plot_data(directory, trace: Trace):
    """One ``robot_<i>.csv`` per robot with time and position columns."""
    directory = Path(directory)
    d = trace.positions.shape[2]
    cols = trace_columns(d)[2:2 + d]
    for i in range(trace.n_robots):
        with open(directory / f"robot_{i}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["time", *cols])
            for t, p in zip(trace.times, trace.positions[:, i]):
                w.writerow([_g(t), *map(_g, p)])


def read_trace(path) -> Trace:
    """Parse a trace file back into a ``Trace`` without committed trajectories.

    Raises
    ------
    ValueError
        If the schema line is missing or names another version.
    """
    with open(path, newline="") as f:
        tag = f.readline().strip()
        if tag != f"# {TRACE_SCHEMA}":
            raise ValueError(f"{path}: expected '# {TRACE_SCHEMA}', found {tag!r}")
        meta = json.loads(f.readline()[1:])
        rows = list(csv.reader(f))
    header, rows = rows[0], rows[1:]
    n, d = meta["robots"], meta["dim"]
    if header != trace_columns(d):
        raise ValueError(f"{path}: unexpected columns {header}")
    S = len(rows) // n if n else 0
    times = np.array([float(rows[k * n][0]) for k in range(S)])
    pos = np.array([[float(x) for x in r[2:2 + d]] for r in rows]).reshape(S, n, d)
    stage = np.array([("" if r[2 + d] == "-" else r[2 + d]) for r in rows],
                     dtype=object).reshape(S, n)
    soft = np.array([r[3 + d] == "1" for r in rows]).reshape(S, n)
    resc = np.array([int(r[4 + d]) for r in rows]).reshape(S, n)
    tr = Trace(meta["dt"], meta["sample_period"], meta["end_time"], meta["hit_cap"], [], [],
               times, pos, stage, soft, resc, np.array(meta["goals"], dtype=float))
    tr.meta = meta
    return tr


def read_iterations(path) -> list[IterationRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [IterationRecord(int(r["step"]), int(r["robot"]), r["ok"] == "1",
                            None if r["failed_stage"] == "-" else r["failed_stage"],
                            r["soft_used"] == "1", int(r["rescales"]), int(r["hard_failures"]),
                            int(r["skipped"]), float(r["elapsed_ms"]))
            for r in rows]


def recount_metrics(trace_path, iterations_path, shapes, grid) -> RunMetrics:
    """Recompute run metrics from the files a run wrote."""
    tr = read_trace(trace_path)
    return compute_metrics(tr, shapes, grid, read_iterations(iterations_path))

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from rlss.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, SWEEP_COLUMNS, main
from rlss.scenario import parse_scenario
from rlss.tracefile import TRACE_SCHEMA, read_iterations, read_trace, recount_metrics

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

RING2D = {
    "name": "ring2d",
    "grid": {"lo": [-3, -3], "hi": [3, 3], "cell_size": 0.5},
    "defaults": {"shape": {"box": [0.1, 0.1]}},
    "ring": {"count": 2, "radius": 2.0, "centre": [0, 0], "duration": 3.0, "seed": 1,
             "angle_jitter": 0.2},
    "duration_cap": 20,
}


@pytest.fixture(scope="module")
def minimal_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("minimal")
    assert main(["run", str(SCENARIOS / "minimal.yaml"), "-o", str(out), "--plot-data"]) == EXIT_OK
    return out


def test_run_writes_expected_files(minimal_run):
    for name in ("trace.csv", "iterations.csv", "metrics.json", "summary.csv", "robot_0.csv"):
        assert (minimal_run / name).is_file()
    with open(minimal_run / "trace.csv") as f:
        assert f.readline().strip() == f"# {TRACE_SCHEMA}"
    doc = json.loads((minimal_run / "metrics.json").read_text())
    assert doc["metrics"]["collisions"] == 0 and doc["scenario"]["robots"][0]["pieces"] == 4


def test_trace_rows_sorted_and_complete(minimal_run):
    tr = read_trace(minimal_run / "trace.csv")
    assert np.all(np.diff(tr.times) > 0) and tr.times[0] == 0.0
    assert tr.times[-1] < tr.end_time
    assert len(tr.times) == int(round(tr.end_time / 0.01))


def test_recount_equals_summary_exactly(minimal_run):
    scn = parse_scenario(SCENARIOS / "minimal.yaml")
    m = recount_metrics(minimal_run / "trace.csv", minimal_run / "iterations.csv",
                        [r.config.shape for r in scn.robots], scn.grid)
    stored = json.loads((minimal_run / "metrics.json").read_text())["metrics"]
    recount = m.summary()
    for k, v in recount.items():
        assert stored[k] == v, k


def test_recount_command(minimal_run, capsys):
    assert main(["recount", str(SCENARIOS / "minimal.yaml"), str(minimal_run)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    stored = json.loads((minimal_run / "metrics.json").read_text())["metrics"]
    assert out["total_distance"] == stored["total_distance"]


def test_iterations_round_trip(minimal_run):
    recs = read_iterations(minimal_run / "iterations.csv")
    assert recs and all(r.robot == 0 for r in recs)
    assert [r.step for r in recs] == list(range(len(recs)))


def test_wrong_schema_rejected(tmp_path):
    p = tmp_path / "trace.csv"
    p.write_text("# other v9\n{}\n")
    with pytest.raises(ValueError, match="rlss-trace v1"):
        read_trace(p)


def test_robot_count_sweep(tmp_path):
    scn = tmp_path / "ring.yaml"
    scn.write_text(yaml.safe_dump(RING2D))
    out = tmp_path / "out"
    assert main(["run", str(scn), "-o", str(out), "--robots", "2,3"]) == EXIT_OK
    with open(out / "summary.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["run"] for r in rows] == ["ring2d_n2", "ring2d_n3"]
    assert [int(r["robots"]) for r in rows] == [2, 3]
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    for r in rows:
        assert (out / r["run"] / "trace.csv").is_file()


def test_validate_prints_resolved_settings(capsys):
    assert main(["validate", str(SCENARIOS / "swap6.yaml")]) == EXIT_OK
    meta = json.loads(capsys.readouterr().out)
    assert len(meta["robots"]) == 6 and meta["grid"]["obstacles"] == 0


def test_invalid_scenario_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"grid": {"lo": [0, 0], "hi": [1, 1], "cell_size": 0.5}}))
    assert main(["run", str(bad), "-o", str(tmp_path / "o")]) == EXIT_INVALID
    assert "robots" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml"), "-o", str(tmp_path / "o")]) == EXIT_INVALID


def test_bad_arguments_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["run", str(SCENARIOS / "minimal.yaml"), "-o", "x", "--robots", "two"])
    assert e.value.code == EXIT_INVALID


def test_unwritable_output_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    assert main(["run", str(SCENARIOS / "minimal.yaml"), "-o", str(blocker / "out")]) == EXIT_RUNTIME

from pathlib import Path

import numpy as np
import pytest

from rlss.replan import Strategy
from rlss.scenario import (
    ScenarioError,
    build_scenario,
    forest_boxes,
    load_document,
    parse_scenario,
    rasterize,
    ring_robots,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def minimal(**extra):
    doc = {"grid": {"lo": [0, 0], "hi": [4, 4], "cell_size": 0.5},
           "robots": [{"shape": {"box": [0.1, 0.1]}, "start": [1, 1],
                       "desired": {"times": [0, 3], "points": [[1, 1], [3, 3]]}}]}
    doc.update(extra)
    return doc


def test_minimal_parses_with_defaults_echoed():
    scn = parse_scenario(SCENARIOS / "minimal.yaml")
    assert len(scn.robots) == 1 and scn.strategy is Strategy.HARD_SOFT
    r = scn.meta["robots"][0]
    assert r["continuity"] == 2 and r["pieces"] == 4 and r["degrees"] == [5] * 4
    assert r["deviation_weights"] == [1.0, 1.0, 1.0, 100.0]
    assert r["soft_weight"] == pytest.approx(1e4)
    assert scn.meta["duration_cap"] == 60.0 and scn.meta["sensing_range"] is None
    assert scn.meta["workspace"] == {"lo": [0.0, 0.0], "hi": [4.0, 4.0]}


def test_swap6_fixture_has_six_robots_no_obstacles():
    scn = parse_scenario(SCENARIOS / "swap6.yaml")
    assert len(scn.robots) == 6 and scn.grid.occupancy.sum() == 0
    assert scn.grid.dim == 3


def test_forest6_fixture_size():
    scn = parse_scenario(SCENARIOS / "forest6.yaml")
    assert len(scn.robots) == 6 and np.all(scn.grid.cell_size == 0.5)
    assert 80 <= scn.meta["grid"]["obstacles"] <= 130


def test_start_in_occupied_cell_rejected():
    doc = minimal()
    doc["grid"]["occupied"] = [[2, 2]]
    doc["robots"][0]["start"] = [1.25, 1.25]
    with pytest.raises(ScenarioError) as e:
        build_scenario(doc)
    assert e.value.field == "robots[0].start"


def test_overlapping_starts_rejected():
    doc = minimal()
    doc["robots"].append(dict(doc["robots"][0], start=[1.1, 1.0]))
    with pytest.raises(ScenarioError) as e:
        build_scenario(doc)
    assert e.value.field == "robots[0].start"


def test_missing_field_named():
    doc = minimal()
    del doc["robots"][0]["shape"]
    with pytest.raises(ScenarioError) as e:
        build_scenario(doc)
    assert e.value.field == "robots[0].shape"
    with pytest.raises(ScenarioError, match="grid"):
        build_scenario({"robots": []})


def test_non_convex_vertices_rejected():
    doc = minimal()
    doc["robots"][0]["shape"] = {"vertices": [[0, 0], [0.2, 0], [0.2, 0.2], [0, 0.2], [0.1, 0.1]]}
    with pytest.raises(ScenarioError, match="not convex") as e:
        build_scenario(doc)
    assert e.value.field == "robots[0].shape.vertices"


def test_vertex_shape_accepted():
    doc = minimal()
    doc["robots"][0]["shape"] = {"vertices": [[-0.1, -0.1], [0.1, -0.1], [0.0, 0.1]]}
    scn = build_scenario(doc)
    assert not scn.robots[0].config.shape.is_box


def test_bad_strategy_and_config():
    with pytest.raises(ScenarioError) as e:
        build_scenario(minimal(strategy="greedy"))
    assert e.value.field == "strategy"
    doc = minimal(defaults={"continuity": 5})
    with pytest.raises(ScenarioError) as e:
        build_scenario(doc)
    assert e.value.field == "robots[0]"


def test_yaml_syntax_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("grid:\n  lo: [0, 0]\n  hi: [4, 4\nrobots: []\n")
    with pytest.raises(ScenarioError) as e:
        load_document(p)
    assert e.value.field.startswith("line ")


def test_missing_file():
    with pytest.raises(ScenarioError, match="cannot read"):
        load_document("/nonexistent/scenario.yaml")


def test_robot_count_override():
    scn = parse_scenario(SCENARIOS / "swap12.yaml", robots_override=4)
    assert len(scn.robots) == 4
    with pytest.raises(ScenarioError):
        parse_scenario(SCENARIOS / "forest6.yaml", robots_override=7)


def test_cell_size_override_rerasterizes():
    a = parse_scenario(SCENARIOS / "forest6.yaml")
    b = parse_scenario(SCENARIOS / "forest6.yaml", cell_size_override=0.25)
    assert np.all(b.grid.cell_size == 0.25)
    assert b.grid.occupancy.sum() >= 4 * a.grid.occupancy.sum()


def test_forest_is_reproducible():
    kw = dict(lo=[0, 0, 0], hi=[10, 10, 3], trunk=0.5)
    a = forest_boxes(3, 12, **kw)
    b = forest_boxes(3, 12, **kw)
    assert len(a) == 12 and all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1])
                                for x, y in zip(a, b))
    g1 = rasterize(a, [0, 0, 0], [10, 10, 3], 0.5)
    g2 = rasterize(b, [0, 0, 0], [10, 10, 3], 0.5)
    assert np.array_equal(g1.occupancy, g2.occupancy)


def test_rasterize_marks_overlapping_cells():
    g = rasterize([(np.array([1.0, 1.0]), np.array([1.5, 2.0]))], [0, 0], [3, 3], 0.5)
    assert set(map(tuple, np.argwhere(g.occupancy))) == {(2, 2), (2, 3)}


def test_ring_robots_swap_through_centre():
    starts, goals = ring_robots(6, 3.0, [0, 0, 1.5], 8.0, seed=1, angle_jitter=0.1,
                                height_jitter=0.2)
    for s, g in zip(starts, goals):
        assert np.allclose((s[:2] + g[:2]) / 2, 0) and s[2] == g[2]
        assert np.hypot(*s[:2]) == pytest.approx(3.0)

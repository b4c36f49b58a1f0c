"""YAML scenario files: parsing, validation and procedural generators.

A scenario document has the top-level keys ``name``, ``grid``,
``workspace``, ``defaults``, ``robots`` or ``ring``, ``strategy``,
``duration_cap``, ``sensing_range``, ``position_noise`` and ``seed``.
See ``docs/formats.md`` for the full schema.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial import ConvexHull, QhullError

from .geometry import ConvexPolytope, ConvexShape
from .planner import DesiredTrajectory, OccupancyGrid
from .replan import RobotConfig, Strategy
from .sim import Scenario, RobotSpec

CONFIG_KEYS = ("continuity", "derivative_limits", "dt", "horizon", "pieces", "degrees",
               "energy_weights", "deviation_weights", "rescale_factor", "soft_weight",
               "max_rescales", "clearance", "goal_resolution", "prune_radius",
               "quick_arrival")


class ScenarioError(ValueError):
    """Invalid scenario document; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# --------------------------------------------------------------------------
# small typed readers


def _req(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise ScenarioError(where, "expected a mapping")
    if key not in d:
        raise ScenarioError(f"{where}.{key}" if where else key, "missing required field")
    return d[key]


def _vec(x, field: str, dim: int | None = None) -> np.ndarray:
    try:
        v = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(field, "expected a list of numbers") from None
    if v.ndim != 1 or (dim is not None and v.size != dim) or not np.all(np.isfinite(v)):
        raise ScenarioError(field, f"expected {dim or 'a list of'} finite numbers")
    return v


def _num(x, field: str, positive: bool = False) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise ScenarioError(field, "expected a finite number")
    if positive and x <= 0:
        raise ScenarioError(field, "must be positive")
    return float(x)


# --------------------------------------------------------------------------
# procedural obstacles


def forest_boxes(seed: int, trees: int, lo, hi, trunk: float, keep_clear=(),
                 clear_radius: float = 0.0, spacing: float = 0.0, snap: float | None = None,
                 max_tries: int = 10000):
    """Seeded square tree trunks as world-space boxes ``(lo, hi)``.

    Trunk centres are drawn uniformly over the first two axes of ``[lo, hi]``
    (then moved to the nearest ``lo + (k + 1/2) snap`` when ``snap`` is given)
    and span the full extent along the remaining axes. Candidates closer than
    ``clear_radius`` (in the first two axes) to a ``keep_clear`` point, or
    closer than ``spacing`` plus one trunk width to an accepted trunk, are
    redrawn. The result depends only on the arguments.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    rng = np.random.default_rng(seed)
    keep = np.asarray(keep_clear, dtype=float).reshape(-1, lo.size)[:, :2]
    centres = []
    tries = 0
    while len(centres) < trees:
        tries += 1
        if tries > max_tries:
            raise ScenarioError("grid.forest", f"could only place {len(centres)} of {trees} trees")
        c = rng.uniform(lo[:2] + trunk / 2, hi[:2] - trunk / 2)
        if snap:
            c = lo[:2] + (np.floor((c - lo[:2]) / snap) + 0.5) * snap
        if len(keep) and np.min(np.linalg.norm(keep - c, axis=1)) < clear_radius:
            continue
        if centres and np.min(np.max(np.abs(np.array(centres) - c), axis=1)) < trunk + spacing:
            continue
        centres.append(c)
    boxes = []
    for c in centres:
        blo, bhi = lo.copy(), hi.copy()
        blo[:2] = c - trunk / 2
        bhi[:2] = c + trunk / 2
        boxes.append((blo, bhi))
    return boxes


def rasterize(boxes, lo, hi, cell_size: float) -> OccupancyGrid:
    """Occupancy grid over ``[lo, hi]`` marking every cell a box overlaps with positive volume."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dims = np.ceil((hi - lo) / cell_size - 1e-9).astype(int)
    occ = np.zeros(tuple(dims), dtype=bool)
    for blo, bhi in boxes:
        a = np.floor((np.asarray(blo) - lo) / cell_size + 1e-9).astype(int)
        b = np.ceil((np.asarray(bhi) - lo) / cell_size - 1e-9).astype(int)
        a = np.clip(a, 0, dims)
        b = np.clip(b, 0, dims)
        if np.all(b > a):
            occ[tuple(slice(i, j) for i, j in zip(a, b))] = True
    return OccupancyGrid(occ, cell_size, origin=lo)


def ring_robots(count: int, radius: float, centre, duration: float, seed: int = 0,
                angle_jitter: float = 0.0, height_jitter: float = 0.0):
    """Starts on a circle, each robot heading for the diametrically opposite point.

    Seeded jitter perturbs the start angle and the height; a robot keeps its
    height on the way across. Returns ``(starts, goals)``.
    """
    centre = np.asarray(centre, dtype=float)
    rng = np.random.default_rng(seed)
    starts, goals = [], []
    for i in range(count):
        a = 2 * math.pi * i / count + rng.uniform(-angle_jitter, angle_jitter)
        dz = rng.uniform(-height_jitter, height_jitter)
        off = np.zeros_like(centre)
        off[0], off[1] = radius * math.cos(a), radius * math.sin(a)
        s = centre + off
        g = centre - off
        if centre.size > 2:
            s[2] += dz
            g[2] += dz
        starts.append(s)
        goals.append(g)
    return starts, goals


# --------------------------------------------------------------------------
# parsing


def _shape(doc, field: str, dim: int) -> ConvexShape:
    if not isinstance(doc, dict) or len(doc) != 1 or next(iter(doc)) not in ("box", "vertices"):
        raise ScenarioError(field, "expected {box: [half extents]} or {vertices: [[...], ...]}")
    if "box" in doc:
        he = _vec(doc["box"], f"{field}.box", dim)
        if np.any(he < 0):
            raise ScenarioError(f"{field}.box", "half extents must be non-negative")
        return ConvexShape.box(he)
    try:
        v = np.asarray(doc["vertices"], dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"{field}.vertices", "expected a list of points") from None
    if v.ndim != 2 or v.shape[1] != dim or not len(v):
        raise ScenarioError(f"{field}.vertices", f"expected points with {dim} coordinates")
    uniq = np.unique(v, axis=0)
    if len(uniq) > dim:
        try:
            hull = ConvexHull(uniq)
        except QhullError:
            raise ScenarioError(f"{field}.vertices", "vertices are degenerate (flat)") from None
        if len(hull.vertices) != len(uniq):
            raise ScenarioError(f"{field}.vertices",
                                "not convex: some vertices lie inside the hull of the others")
    return ConvexShape(uniq)


def _config(doc: dict, field: str, dim: int, workspace) -> tuple[RobotConfig, dict]:
    shape = _shape(_req(doc, "shape", field), f"{field}.shape", dim)
    kwargs = {}
    for k in CONFIG_KEYS:
        if k in doc and doc[k] is not None:
            kwargs[k] = doc[k]
    if "energy_weights" in kwargs:
        ew = kwargs["energy_weights"]
        if not isinstance(ew, dict):
            raise ScenarioError(f"{field}.energy_weights", "expected a mapping order -> weight")
        kwargs["energy_weights"] = {int(k): _num(v, f"{field}.energy_weights.{k}")
                                    for k, v in ew.items()}
    try:
        cfg = RobotConfig(shape=shape, workspace=workspace, **kwargs)
    except (TypeError, ValueError) as e:
        raise ScenarioError(field, str(e)) from None
    resolved = {
        "shape": shape.vertices.tolist(),
        "continuity": cfg.continuity, "derivative_limits": list(cfg.derivative_limits),
        "dt": cfg.dt, "horizon": cfg.horizon, "pieces": cfg.pieces,
        "degrees": list(cfg.degrees), "energy_weights": dict(cfg.energy_weights),
        "deviation_weights": list(cfg.deviation_weights),
        "rescale_factor": cfg.rescale_factor, "soft_weight": cfg.soft_weight,
        "max_rescales": cfg.max_rescales, "clearance": cfg.clearance,
        "goal_resolution": cfg.goal_resolution, "prune_radius": cfg.prune_radius,
        "quick_arrival": cfg.quick_arrival,
    }
    return cfg, resolved


def _desired(doc, field: str, dim: int, start) -> DesiredTrajectory:
    if doc is None:
        return DesiredTrajectory(point=start)
    times = _vec(_req(doc, "times", field), f"{field}.times")
    try:
        pts = np.asarray(_req(doc, "points", field), dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"{field}.points", "expected a list of points") from None
    if pts.ndim != 2 or pts.shape != (times.size, dim):
        raise ScenarioError(f"{field}.points", f"expected {times.size} points of dimension {dim}")
    try:
        return DesiredTrajectory.from_waypoints(times, pts)
    except ValueError as e:
        raise ScenarioError(f"{field}.times", str(e)) from None


def _grid(doc: dict, cell_size_override=None):
    g = _req(doc, "grid", "")
    lo = _vec(_req(g, "lo", "grid"), "grid.lo")
    dim = lo.size
    hi = _vec(_req(g, "hi", "grid"), "grid.hi", dim)
    if np.any(hi <= lo):
        raise ScenarioError("grid.hi", "must exceed grid.lo on every axis")
    cs = _num(cell_size_override if cell_size_override is not None else _req(g, "cell_size", "grid"),
              "grid.cell_size", positive=True)
    boxes = []
    for k, b in enumerate(g.get("boxes") or []):
        blo = _vec(_req(b, "lo", f"grid.boxes[{k}]"), f"grid.boxes[{k}].lo", dim)
        bhi = _vec(_req(b, "hi", f"grid.boxes[{k}]"), f"grid.boxes[{k}].hi", dim)
        boxes.append((blo, bhi))
    meta = {"lo": lo.tolist(), "hi": hi.tolist(), "cell_size": cs}
    if g.get("forest"):
        f = g["forest"]
        flo = _vec(f.get("lo", lo), "grid.forest.lo", dim)
        fhi = _vec(f.get("hi", hi), "grid.forest.hi", dim)
        keep = f.get("keep_clear", [])
        boxes += forest_boxes(int(_req(f, "seed", "grid.forest")),
                              int(_req(f, "trees", "grid.forest")), flo, fhi,
                              _num(f.get("trunk", cs), "grid.forest.trunk", positive=True),
                              keep, _num(f.get("clear_radius", 0.0), "grid.forest.clear_radius"),
                              _num(f.get("spacing", 0.0), "grid.forest.spacing"),
                              _num(f["snap"], "grid.forest.snap", positive=True) if f.get("snap") else None)
    grid = rasterize(boxes, lo, hi, cs)
    cells = g.get("occupied") or []
    if cells and cell_size_override is not None:
        raise ScenarioError("grid.occupied", "explicit cells cannot be re-rasterized for a cell-size sweep")
    occ = grid.occupancy.copy()
    for k, c in enumerate(cells):
        idx = tuple(int(v) for v in c)
        if len(idx) != dim or not all(0 <= v < n for v, n in zip(idx, occ.shape)):
            raise ScenarioError(f"grid.occupied[{k}]", f"cell outside the {occ.shape} grid")
        occ[idx] = True
    grid = OccupancyGrid(occ, cs, origin=lo)
    meta.update(dims=list(occ.shape), cells=int(occ.size), obstacles=int(occ.sum()))
    return grid, meta


def load_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ScenarioError("file", f"cannot read {path}: {e.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "file"
        raise ScenarioError(where, f"YAML syntax error: {getattr(e, 'problem', e)}") from None
    if not isinstance(doc, dict):
        raise ScenarioError("file", "top level must be a mapping")
    return doc


def build_scenario(doc: dict, *, robots_override: int | None = None,
                   cell_size_override: float | None = None) -> Scenario:
    """Validated ``Scenario`` from a parsed document.

    The fully resolved settings, defaults included, are stored in
    ``scenario.meta``.
    """
    doc = copy.deepcopy(doc)
    grid, grid_meta = _grid(doc, cell_size_override)
    dim = grid.dim
    ws_doc = doc.get("workspace")
    if ws_doc is None:
        workspace = ConvexPolytope.box(grid.lo, grid.hi)
        ws_meta = {"lo": grid.lo.tolist(), "hi": grid.hi.tolist()}
    else:
        wlo = _vec(_req(ws_doc, "lo", "workspace"), "workspace.lo", dim)
        whi = _vec(_req(ws_doc, "hi", "workspace"), "workspace.hi", dim)
        if np.any(whi <= wlo):
            raise ScenarioError("workspace.hi", "must exceed workspace.lo on every axis")
        workspace = ConvexPolytope.box(wlo, whi)
        ws_meta = {"lo": wlo.tolist(), "hi": whi.tolist()}
    defaults = doc.get("defaults") or {}
    if not isinstance(defaults, dict):
        raise ScenarioError("defaults", "expected a mapping")

    entries = []
    if "ring" in doc:
        if "robots" in doc:
            raise ScenarioError("ring", "give either robots or ring, not both")
        r = doc["ring"]
        count = robots_override if robots_override is not None else int(_req(r, "count", "ring"))
        if count < 1:
            raise ScenarioError("ring.count", "must be at least 1")
        duration = _num(_req(r, "duration", "ring"), "ring.duration", positive=True)
        starts, goals = ring_robots(count, _num(_req(r, "radius", "ring"), "ring.radius", True),
                                    _vec(_req(r, "centre", "ring"), "ring.centre", dim), duration,
                                    int(r.get("seed", 0)),
                                    _num(r.get("angle_jitter", 0.0), "ring.angle_jitter"),
                                    _num(r.get("height_jitter", 0.0), "ring.height_jitter"))
        for s, g in zip(starts, goals):
            entries.append({"start": s.tolist(),
                            "desired": {"times": [0.0, duration], "points": [s.tolist(), g.tolist()]}})
    else:
        entries = _req(doc, "robots", "")
        if not isinstance(entries, list) or not entries:
            raise ScenarioError("robots", "expected a non-empty list")
        if robots_override is not None:
            if robots_override > len(entries):
                raise ScenarioError("robots", f"only {len(entries)} robots listed, {robots_override} requested")
            entries = entries[:robots_override]

    robots, robot_meta = [], []
    for i, e in enumerate(entries):
        field = f"robots[{i}]"
        if not isinstance(e, dict):
            raise ScenarioError(field, "expected a mapping")
        merged = {**defaults, **e}
        cfg, resolved = _config(merged, field, dim, workspace)
        start = _vec(_req(e, "start", field), f"{field}.start", dim)
        desired = _desired(e.get("desired"), f"{field}.desired", dim, start)
        robots.append(RobotSpec(cfg, start, desired))
        robot_meta.append({"start": start.tolist(), **resolved})

    strategy = str(doc.get("strategy", "hard_soft")).lower().replace("-", "_")
    try:
        strategy = Strategy(strategy)
    except ValueError:
        raise ScenarioError("strategy", "expected hard or hard_soft") from None
    cap = _num(doc.get("duration_cap", 60.0), "duration_cap", positive=True)
    rng_doc = doc.get("sensing_range")
    sensing = None if rng_doc is None else _num(rng_doc, "sensing_range", positive=True)
    noise = _num(doc.get("position_noise", 0.0), "position_noise")
    if noise < 0:
        raise ScenarioError("position_noise", "must be non-negative")
    scn = Scenario(grid, robots, strategy, cap, sensing, noise, int(doc.get("seed", 0)),
                   str(doc.get("name", "scenario")))
    try:
        scn.validate()
    except ValueError as e:
        msg = str(e)
        field, _, rest = msg.partition(": ")
        raise ScenarioError(field, rest or msg) from None
    scn.meta = {
        "name": scn.name, "strategy": strategy.value, "duration_cap": cap,
        "sensing_range": sensing, "position_noise": noise, "seed": scn.seed,
        "grid": grid_meta, "workspace": ws_meta, "robots": robot_meta,
    }
    return scn


def parse_scenario(path, **overrides) -> Scenario:
    """Read, validate and build the scenario at ``path``.

    Raises
    ------
    ScenarioError
        With the offending field (or YAML line) in ``.field``.
    """
    return build_scenario(load_document(path), **overrides)

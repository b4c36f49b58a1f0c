"""Safe corridors: per-segment polytopes of buffered separating half-spaces."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ConvexPolytope,
    ConvexShape,
    Hyperplane,
    SeparationError,
    box_separate,
    buffer_hyperplane,
    buffer_polytope,
    convex_sets_intersect,
    segment_swept_hull,
    svm_separate,
    svm_separate_many,
    swept_box_separate,
)
from .planner import DEFAULT_CLEARANCE, DiscretePlan, OccupancyGrid, Workspace


class CorridorError(RuntimeError):
    """A segment could not be separated from an obstacle."""

    def __init__(self, message, segment=None, obstacle=None):
        super().__init__(message)
        self.segment = segment
        self.obstacle = obstacle


class ObstacleSet:
    """Convex obstacles with cached bounding boxes.

    Built either from an occupancy grid (one box per occupied cell) or from
    an explicit list of vertex arrays / ``ConvexShape`` in world coordinates.
    """

    def __init__(self, lo, hi, vertices=None, boxes=True):
        self.lo = np.asarray(lo, dtype=float).reshape(len(lo), -1) if len(lo) else np.zeros((0, 0))
        self.hi = np.asarray(hi, dtype=float).reshape(len(hi), -1) if len(hi) else np.zeros((0, 0))
        self._vertices = vertices
        self.boxes = boxes

    @classmethod
    def from_grid(cls, grid: OccupancyGrid) -> "ObstacleSet":
        return cls(grid.occupied_lo, grid.occupied_hi)

    @classmethod
    def from_shapes(cls, shapes) -> "ObstacleSet":
        verts = [s.vertices if isinstance(s, ConvexShape) else np.asarray(s, float) for s in shapes]
        lo = [v.min(0) for v in verts]
        hi = [v.max(0) for v in verts]
        return cls(lo, hi, verts, boxes=False)

    def __len__(self):
        return len(self.lo)

    def vertices(self, i: int) -> np.ndarray:
        if self._vertices is not None:
            return self._vertices[i]
        from .planner import box_vertices
        return box_vertices(self.lo[i], self.hi[i]).vertices

    def near(self, lo, hi, radius: float) -> np.ndarray:
        """Indices whose bounding box lies within ``radius`` of the box ``[lo, hi]``."""
        if not len(self):
            return np.zeros(0, dtype=int)
        gap = np.maximum(0.0, np.maximum(self.lo - hi, lo - self.hi))
        return np.flatnonzero(np.linalg.norm(gap, axis=1) <= radius)


def as_obstacles(obstacles) -> ObstacleSet:
    if isinstance(obstacles, ObstacleSet):
        return obstacles
    if isinstance(obstacles, OccupancyGrid):
        return ObstacleSet.from_grid(obstacles)
    obstacles = list(obstacles) if obstacles is not None else []
    if not obstacles:
        return ObstacleSet([], [])
    return ObstacleSet.from_shapes(obstacles)


@dataclass
class SafeCorridor:
    """One buffered polytope per plan segment.

    ``provenance[j][k]`` labels half-space ``k`` of polytope ``j`` as
    ``("obstacle", i)``, ``("robot", r)`` or ``("workspace", w)``.
    ``skipped`` lists separations dropped because the robot already overlaps
    the other body.
    """

    polytopes: list
    provenance: list
    hulls: list
    shape: ConvexShape
    obstacles: ObstacleSet
    skipped: list = field(default_factory=list)
    clearance: float = DEFAULT_CLEARANCE

    def __len__(self):
        return len(self.polytopes)

    def obstacle_ids(self, j: int) -> set:
        return {i for kind, i in self.provenance[j] if kind == "obstacle"}

    def count(self, kind: str) -> int:
        return sum(1 for prov in self.provenance for k, _ in prov if k == kind)

    def add_obstacles(self, j: int, ids) -> int:
        """Separate segment ``j`` from extra obstacles (lazy constraint generation).

        Returns the number of half-spaces added.
        """
        ids = [i for i in ids if i not in self.obstacle_ids(j)]
        if not ids:
            return 0
        planes = _separate(self.hulls[j], self.obstacles, ids, j, self.shape)
        # a zero-length segment shares its predecessor's constraints
        for jj in _sharing(self.hulls, j):
            for i, h in zip(ids, planes):
                if i in self.obstacle_ids(jj):
                    continue
                self.polytopes[jj].halfspaces.insert(
                    0, tighten(h, self.hulls[j]["vertices"], self.shape, self.clearance))
                self.provenance[jj].insert(0, ("obstacle", int(i)))
        return len(ids)


def _sharing(hulls, j):
    # segment j plus the run of zero-length segments that follow it
    out = [j]
    k = j + 1
    while k < len(hulls) and hulls[k]["zero"]:
        out.append(k)
        k += 1
    return out


def _separate(hull, obstacles: ObstacleSet, ids, segment, shape=None):
    if shape is not None and shape.is_box and obstacles.boxes:
        ids = list(ids)
        slo, shi = shape.aabb()
        try:
            return swept_box_separate(hull["a"], hull["b"], slo, shi,
                                      obstacles.lo[ids], obstacles.hi[ids])
        except SeparationError as e:
            i = ids[e.tag]
            raise CorridorError(f"segment {segment} intersects obstacle {i}", segment, i) from e
    pairs = [(hull["vertices"], obstacles.vertices(i)) for i in ids]
    try:
        return svm_separate_many(pairs, tags=list(ids))
    except SeparationError as e:
        raise CorridorError(f"segment {segment} intersects obstacle {e.tag}",
                            segment, e.tag) from e


def tighten(h: Hyperplane, inside, shape: ConvexShape, clearance: float) -> Hyperplane:
    """Buffer ``h`` by ``shape`` and pull it a further ``min(clearance, margin / 2)`` inwards.

    ``margin`` is the distance from ``h`` to the points it was fitted to keep
    inside. Those points stay strictly admissible, and bodies on both sides
    keep a positive gap from one replanning step to the next.
    """
    margin = -float(np.max(h.signed_distance(inside)))
    return buffer_hyperplane(h, shape).shifted(max(0.0, min(clearance, 0.5 * margin)))


def robot_hyperplane(shape: ConvexShape, position, other) -> Hyperplane:
    """Max-margin plane between this robot's current shape and another robot's.

    The half-space contains this robot. Both robots computing it from the
    same two shapes obtain the same boundary with opposite orientation.
    """
    other_v = other.vertices if isinstance(other, ConvexShape) else np.asarray(other, float)
    if shape.is_box and _is_aabb(other_v):
        lo, hi = shape.aabb(position)
        return box_separate(lo, hi, other_v.min(0), other_v.max(0))
    return svm_separate(shape.at(position), other_v)


def robot_halfspaces(shape: ConvexShape, position, other_robots, clearance: float = DEFAULT_CLEARANCE):
    """Buffered, tightened half-spaces keeping this robot's reference point away from the others.

    Returns ``(planes, provenance, skipped)``; robots already overlapping
    this one cannot be separated and are listed in ``skipped``.
    """
    planes, prov, skipped = [], [], []
    here = shape.at(position)
    for r, other in enumerate(other_robots):
        try:
            h = robot_hyperplane(shape, position, other)
        except SeparationError:
            skipped.append(("robot", r))
            continue
        planes.append(tighten(h, here, shape, clearance))
        prov.append(("robot", r))
    return planes, prov, skipped


def _is_aabb(v):
    lo, hi = v.min(0), v.max(0)
    on_faces = np.all(np.isclose(v, lo, atol=1e-12) | np.isclose(v, hi, atol=1e-12), axis=1)
    return bool(np.all(on_faces)) and len(np.unique(v, axis=0)) == 2 ** v.shape[1]


def build_corridor(plan: DiscretePlan, shape: ConvexShape, obstacles, other_robots,
                   workspace: Workspace | None, v_max: float | None = None,
                   clearance: float = DEFAULT_CLEARANCE, robot_planes=None,
                   prune_radius: float | None = None) -> SafeCorridor:
    """Per-segment safe polytopes in reference-point space.

    For each segment, every obstacle within the pruning radius
    ``v_max * T_j + diameter`` (or ``prune_radius`` when given; with neither,
    every obstacle) of its swept hull is separated from the hull
    by a max-margin plane. Other robots are separated from this robot's
    shape at its current position (the plan's first waypoint); those planes
    are shared by every segment (``robot_halfspaces``, or pass them in as
    ``robot_planes``). All planes are buffered by the robot's own shape,
    tightened by ``clearance`` where the margin allows (see ``tighten``),
    and the buffered workspace is appended.

    Raises
    ------
    CorridorError
        If a segment's swept hull cannot be separated from an obstacle.
    """
    obs = as_obstacles(obstacles)
    p0 = plan.waypoints[0]
    hulls = []
    for j, (a, b) in enumerate(plan.segments):
        verts = segment_swept_hull(a, b, shape)
        hulls.append({"vertices": verts, "a": np.asarray(a, float), "b": np.asarray(b, float), "zero": j > 0 and np.linalg.norm(b - a) <= 1e-12,
                      "lo": verts.min(0), "hi": verts.max(0)})

    ws = buffer_polytope(workspace, shape) if workspace is not None else ConvexPolytope()
    ws_prov = [("workspace", k) for k in range(len(ws))]

    start_shape = shape.at(p0)
    if robot_planes is None:
        robot_planes = robot_halfspaces(shape, p0, other_robots, clearance)
    robot_planes, robot_prov, skipped = robot_planes
    skipped = list(skipped)

    polytopes, provenance = [], []
    for j, hull in enumerate(hulls):
        if hull["zero"]:
            prev = polytopes[-1]
            polytopes.append(ConvexPolytope(list(prev.halfspaces)))
            provenance.append(list(provenance[-1]))
            continue
        if prune_radius is not None:
            rho = prune_radius
        elif v_max is not None:
            rho = v_max * plan.durations[j] + shape.diameter
        else:
            rho = np.inf
        ids = np.arange(len(obs)) if np.isinf(rho) else obs.near(hull["lo"], hull["hi"], rho)
        ids = [int(i) for i in ids]
        if j == 0 and ids:
            # an obstacle already overlapping the robot cannot be separated; drop it for this piece
            clash = [i for i in ids if _overlaps(start_shape, obs, i)]
            for i in clash:
                skipped.append(("obstacle", i))
            ids = [i for i in ids if i not in clash]
        planes = _separate(hull, obs, ids, j, shape) if ids else []
        hs = [tighten(h, hull["vertices"], shape, clearance) for h in planes]
        hs += list(robot_planes) + list(ws.halfspaces)
        prov = [("obstacle", i) for i in ids] + list(robot_prov) + list(ws_prov)
        polytopes.append(ConvexPolytope(hs))
        provenance.append(prov)
    return SafeCorridor(polytopes, provenance, hulls, shape, obs, skipped, clearance)


def _overlaps(verts, obs: ObstacleSet, i) -> bool:
    lo, hi = verts.min(0), verts.max(0)
    if np.any(np.minimum(hi, obs.hi[i]) - np.maximum(lo, obs.lo[i]) <= 0):
        return False
    if obs.boxes:
        return True
    return convex_sets_intersect(verts, obs.vertices(i), tol=0.0)

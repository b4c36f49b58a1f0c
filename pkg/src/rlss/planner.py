"""Goal selection and discrete search on an occupancy grid."""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import (
    BezierPiece,
    ConvexPolytope,
    ConvexShape,
    PiecewiseTrajectory,
    boxes_overlap,
    buffer_polytope,
    convex_sets_intersect,
    segment_swept_hull,
)

Workspace = ConvexPolytope

DEFAULT_CLEARANCE = 1e-3


class SearchError(RuntimeError):
    """Discrete search could not start (the start cell is blocked)."""


class OccupancyGrid:
    """Dense boolean lattice of axis-aligned cells.

    Cell ``i`` (an integer index tuple) spans ``origin + i * cell_size`` to
    ``origin + (i + 1) * cell_size``; every occupied cell is its own obstacle.
    """

    def __init__(self, occupancy, cell_size, origin=None):
        occ = np.asarray(occupancy, dtype=bool)
        if occ.ndim not in (2, 3):
            raise ValueError("occupancy must be a 2D or 3D array")
        cs = np.broadcast_to(np.asarray(cell_size, dtype=float), (occ.ndim,)).copy()
        if np.any(cs <= 0):
            raise ValueError("cell size must be positive")
        self.occupancy = occ
        self.occupancy.setflags(write=False)
        self.cell_size = cs
        self.origin = np.zeros(occ.ndim) if origin is None else np.asarray(origin, dtype=float)
        idx = np.argwhere(occ)
        self.occupied_index = idx
        self.occupied_lo = self.origin + idx * cs
        self.occupied_hi = self.occupied_lo + cs
        self._inflation_cache = {}

    @property
    def dim(self) -> int:
        return self.occupancy.ndim

    @property
    def shape(self):
        return self.occupancy.shape

    @property
    def n_obstacles(self) -> int:
        return len(self.occupied_index)

    @property
    def lo(self):
        return self.origin.copy()

    @property
    def hi(self):
        return self.origin + self.cell_size * np.array(self.shape)

    def __repr__(self):
        return (f"OccupancyGrid(shape={self.shape}, cell_size={self.cell_size.tolist()}, "
                f"obstacles={self.n_obstacles})")

    def obstacles(self):
        """Yield each occupied cell as a box ``ConvexShape`` in world coordinates."""
        for lo, hi in zip(self.occupied_lo, self.occupied_hi):
            yield box_vertices(lo, hi)

    def obstacle_vertices(self, i: int) -> ConvexShape:
        return box_vertices(self.occupied_lo[i], self.occupied_hi[i])

    def cell_of(self, x) -> tuple:
        i = np.floor((np.asarray(x, dtype=float) - self.origin) / self.cell_size).astype(int)
        i = np.clip(i, 0, np.array(self.shape) - 1)
        return tuple(int(v) for v in i)

    def center(self, cell) -> np.ndarray:
        return self.origin + (np.asarray(cell, dtype=float) + 0.5) * self.cell_size

    def in_bounds(self, cell) -> bool:
        return all(0 <= c < n for c, n in zip(cell, self.shape))

    def obstacles_near(self, lo, hi, margin: float = 0.0) -> np.ndarray:
        """Indices of occupied cells whose box comes within ``margin`` of ``[lo, hi]``."""
        if not self.n_obstacles:
            return np.zeros(0, dtype=int)
        lo = np.asarray(lo) - margin
        hi = np.asarray(hi) + margin
        m = np.all((self.occupied_lo <= hi) & (self.occupied_hi >= lo), axis=1)
        return np.flatnonzero(m)

    def shape_collides(self, shape: ConvexShape, p, clearance: float = 0.0) -> bool:
        """Whether ``shape`` placed at ``p`` overlaps an occupied cell (grown by ``clearance``)."""
        lo, hi = shape.aabb(p)
        cand = self.obstacles_near(lo, hi, clearance)
        if not cand.size:
            return False
        olo = self.occupied_lo[cand] - clearance
        ohi = self.occupied_hi[cand] + clearance
        overlap = boxes_overlap(lo, hi, olo, ohi)
        if shape.is_box:
            return bool(np.any(overlap))
        verts = shape.at(p)
        return any(convex_sets_intersect(verts, box_vertices(a, b).vertices)
                   for a, b in zip(olo[overlap], ohi[overlap]))

    def segment_collides(self, a, b, shape: ConvexShape, clearance: float = 0.0) -> bool:
        """Whether the shape swept from ``a`` to ``b`` overlaps an occupied cell."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        slo, shi = shape.aabb()
        lo = np.minimum(a, b) + slo
        hi = np.maximum(a, b) + shi
        cand = self.obstacles_near(lo, hi, clearance)
        if not cand.size:
            return False
        olo = self.occupied_lo[cand] - clearance
        ohi = self.occupied_hi[cand] + clearance
        if shape.is_box:
            # segment against cells grown by the robot box (Minkowski sum)
            return bool(np.any(_segment_hits_boxes(a, b, olo - shi, ohi - slo)))
        hull = segment_swept_hull(a, b, shape)
        return any(convex_sets_intersect(hull, box_vertices(l, h).vertices)
                   for l, h in zip(olo, ohi))

    def blocked_cells(self, shape: ConvexShape, workspace: Workspace | None = None,
                      clearance: float = 0.0) -> np.ndarray:
        """Boolean lattice: cell centre unusable as a reference position for ``shape``."""
        ws_key = None if workspace is None else (workspace.A.tobytes(), workspace.b.tobytes())
        key = (shape.vertices.tobytes(), ws_key, clearance)
        if key in self._inflation_cache:
            return self._inflation_cache[key]
        stencil = self._stencil(shape, clearance)
        blocked = ndimage.binary_dilation(self.occupancy, structure=stencil) \
            if self.n_obstacles else np.zeros(self.shape, dtype=bool)
        if workspace is not None and len(workspace):
            buf = buffer_polytope(workspace, shape)
            centers = self.origin + (np.indices(self.shape).reshape(self.dim, -1).T + 0.5) * self.cell_size
            outside = np.any(buf.residuals(centers) > 1e-9, axis=1).reshape(self.shape)
            blocked = blocked | outside
        blocked.setflags(write=False)
        self._inflation_cache[key] = blocked
        return blocked

    def _stencil(self, shape: ConvexShape, clearance: float) -> np.ndarray:
        # offsets k (in cells) such that the shape at a centre overlaps the cell k away
        slo, shi = shape.aabb()
        reach = np.maximum(np.abs(slo), np.abs(shi)) + clearance + 0.5 * self.cell_size
        K = np.ceil(reach / self.cell_size).astype(int)
        stencil = np.zeros(tuple(2 * K + 1), dtype=bool)
        half = 0.5 * self.cell_size + clearance
        for k in itertools.product(*[range(-n, n + 1) for n in K]):
            c = np.array(k) * self.cell_size
            lo, hi = c - half, c + half
            if not boxes_overlap(slo, shi, lo, hi):
                continue
            if shape.is_box or convex_sets_intersect(shape.vertices, box_vertices(lo, hi).vertices):
                stencil[tuple(np.array(k) + K)] = True
        # dilation reflects the structure; the stencil is symmetric for boxes but not in general
        return stencil[tuple(slice(None, None, -1) for _ in K)]


def box_vertices(lo, hi) -> ConvexShape:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.size
    corners = np.array(list(itertools.product([0, 1], repeat=d)), dtype=float)
    return ConvexShape(lo + corners * (hi - lo))


def _segment_hits_boxes(a, b, lo, hi, tol=1e-12):
    """Slab test of segment ``a -> b`` against many open boxes ``(lo, hi)``."""
    d = b - a
    t0 = np.zeros(len(lo))
    t1 = np.ones(len(lo))
    hit = np.ones(len(lo), dtype=bool)
    for ax in range(a.size):
        if abs(d[ax]) < 1e-15:
            inside = (a[ax] > lo[:, ax] + tol) & (a[ax] < hi[:, ax] - tol)
            hit &= inside
            continue
        ta = (lo[:, ax] - a[ax]) / d[ax]
        tb = (hi[:, ax] - a[ax]) / d[ax]
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    # grazing contact gives a zero-length parameter interval
    return hit & (t1 - t0 > 1e-12)


class DesiredTrajectory:
    """Desired path ``o(t)``; times past its end clamp to the final point."""

    def __init__(self, trajectory: PiecewiseTrajectory | None = None, point=None):
        if trajectory is None and point is None:
            raise ValueError("need a trajectory or a fixed point")
        self.trajectory = trajectory
        self._point = None if point is None else np.asarray(point, dtype=float)

    @classmethod
    def from_waypoints(cls, times, points) -> "DesiredTrajectory":
        """Piecewise-linear interpolation through timestamped waypoints."""
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or len(times) != len(points):
            raise ValueError("need one timestamp per waypoint")
        if len(points) == 1:
            return cls(point=points[0])
        dts = np.diff(times)
        if np.any(dts <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        if times[0] != 0:
            raise ValueError("waypoint times must start at 0")
        pieces = [BezierPiece(points[i:i + 2], dts[i]) for i in range(len(dts))]
        return cls(PiecewiseTrajectory(pieces))

    @property
    def total_duration(self) -> float:
        return 0.0 if self.trajectory is None else self.trajectory.total_duration

    @property
    def dim(self) -> int:
        return self._point.size if self.trajectory is None else self.trajectory.dim

    def __call__(self, t):
        if self.trajectory is None:
            if np.ndim(t) == 0:
                return self._point.copy()
            return np.tile(self._point, (np.size(t), 1))
        return self.trajectory.eval(np.maximum(t, 0.0))

    def end_point(self) -> np.ndarray:
        return self(self.total_duration)


@dataclass
class DiscretePlan:
    """``L`` chained segments (as ``L + 1`` waypoints) and their durations.

    ``target`` is the path vertex the plan was heading to before any
    truncation; it defaults to the last waypoint.
    """

    waypoints: np.ndarray
    durations: np.ndarray
    target: np.ndarray | None = None

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        self.durations = np.asarray(self.durations, dtype=float)
        if len(self.waypoints) != len(self.durations) + 1:
            raise ValueError("need one more waypoint than durations")
        if np.any(self.durations <= 0):
            raise ValueError("segment durations must be positive")
        self.target = (self.waypoints[-1].copy() if self.target is None
                       else np.asarray(self.target, dtype=float))

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    @property
    def segments(self):
        return [(self.waypoints[j], self.waypoints[j + 1]) for j in range(self.n_segments)]

    @property
    def total_duration(self) -> float:
        return float(self.durations.sum())

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)

    @property
    def start(self):
        return self.waypoints[0]

    @property
    def goal(self):
        return self.waypoints[-1]


def shape_free(grid: OccupancyGrid, shape: ConvexShape, workspace: Workspace | None, p,
               clearance: float = DEFAULT_CLEARANCE) -> bool:
    """Whether the shape at ``p`` avoids every occupied cell and stays in the workspace."""
    if workspace is not None and len(workspace):
        buf = buffer_polytope(workspace, shape)
        if np.any(buf.residuals(np.asarray(p, dtype=float)) > 1e-9):
            return False
    return not grid.shape_collides(shape, p, clearance)


def segment_free(grid: OccupancyGrid, shape: ConvexShape, workspace: Workspace | None, a, b,
                 clearance: float = DEFAULT_CLEARANCE) -> bool:
    """Swept-hull test for a straight translation; convexity reduces the workspace test to endpoints."""
    if workspace is not None and len(workspace):
        buf = buffer_polytope(workspace, shape)
        if np.any(buf.residuals(np.vstack([a, b])) > 1e-9):
            return False
    return not grid.segment_collides(a, b, shape, clearance)


def select_goal(desired: DesiredTrajectory, grid: OccupancyGrid, shape: ConvexShape,
                workspace: Workspace | None, now: float, tau: float, position,
                resolution: float, clearance: float = DEFAULT_CLEARANCE):
    """Latest collision-free point of the desired trajectory within the horizon.

    Scans ``t = now + tau, now + tau - resolution, ...`` down to ``now`` and
    returns ``(o(t*), t* - now)`` for the first ``t*`` where the shape is
    free. When none is, the robot's current position is returned with the
    full horizon so that it holds still.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    for t in goal_scan_times(now, tau, resolution):
        g = desired(t)
        if shape_free(grid, shape, workspace, g, clearance):
            return g, t - now
    return np.asarray(position, dtype=float).copy(), tau


def goal_scan_times(now: float, tau: float, resolution: float):
    n = int(math.floor(tau / resolution + 1e-9))
    times = [now + tau - k * resolution for k in range(n + 1)]
    if times[-1] > now:
        times.append(now)
    return times


def astar(grid: OccupancyGrid, blocked: np.ndarray, start: tuple, goal: tuple,
          connectivity: str = "axis"):
    """A* over free cells with axis-aligned moves and a Euclidean heuristic.

    Returns ``(cells, reached)``. When the goal cannot be reached the path
    leads to the expanded cell closest to the goal by the heuristic.
    Ties are broken by lexicographic cell index.
    """
    if blocked[start]:
        raise SearchError(f"start cell {start} is blocked")
    cs = grid.cell_size
    gcenter = np.asarray(goal, dtype=float) * cs

    def h(c):
        return float(np.linalg.norm(np.asarray(c, dtype=float) * cs - gcenter))

    moves = []
    for ax in range(grid.dim):
        for s in (-1, 1):
            m = [0] * grid.dim
            m[ax] = s
            moves.append((tuple(m), float(cs[ax])))
    shape = grid.shape
    g_cost = {start: 0.0}
    parent = {start: None}
    closed = set()
    heap = [(h(start), start)]
    best, best_h = start, h(start)
    while heap:
        f, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        closed.add(cur)
        hc = h(cur)
        if hc < best_h - 1e-12 or (abs(hc - best_h) <= 1e-12 and cur < best):
            best, best_h = cur, hc
        if cur == goal:
            break
        gc = g_cost[cur]
        for m, w in moves:
            nb = tuple(a + b for a, b in zip(cur, m))
            if not all(0 <= v < n for v, n in zip(nb, shape)) or blocked[nb] or nb in closed:
                continue
            ng = gc + w
            if ng < g_cost.get(nb, math.inf) - 1e-12:
                g_cost[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + h(nb), nb))
    target = goal if goal in closed else best
    path = [target]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1], target == goal


def _centres_inside(grid: OccupancyGrid, lo, hi) -> np.ndarray:
    """Cells whose centre lies strictly inside any of the boxes ``[lo_k, hi_k]``."""
    mask = np.zeros(grid.shape, dtype=bool)
    for l, h in zip(lo, hi):
        a = np.ceil((l - grid.origin) / grid.cell_size - 0.5 + 1e-12).astype(int)
        b = np.floor((h - grid.origin) / grid.cell_size - 0.5 - 1e-12).astype(int)
        a = np.maximum(a, 0)
        b = np.minimum(b, np.array(grid.shape) - 1)
        if np.all(a <= b):
            mask[tuple(slice(i, j + 1) for i, j in zip(a, b))] = True
    return mask


def clip_polyline(points, poly: ConvexPolytope) -> list:
    """Polyline prefix up to the first point where it leaves ``poly``.

    A start outside ``poly`` yields just the start.
    """
    A, b = poly.A, poly.b
    out = [np.asarray(points[0], dtype=float)]
    if np.any(A @ out[0] + b > 1e-12):
        return out
    for q in points[1:]:
        a = out[-1]
        q = np.asarray(q, dtype=float)
        g0 = A @ a + b
        rate = A @ (q - a)
        leaving = g0 + rate > 0
        if not np.any(leaving):
            out.append(q)
            continue
        t = float(np.min(np.clip(-g0[leaving] / rate[leaving], 0.0, 1.0)))
        out.append(a + t * (q - a))
        break
    return out


def shortcut(points, free) -> list:
    """Greedy shortcutting: from each anchor jump to the farthest point ``free(anchor, .)`` allows.

    If no later point is reachable from an anchor the path is cut there.
    """
    out = [points[0]]
    i = 0
    while i < len(points) - 1:
        j = next((k for k in range(len(points) - 1, i, -1) if free(points[i], points[k])), None)
        if j is None:
            break
        out.append(points[j])
        i = j
    return out


def resize_segments(points, L: int) -> np.ndarray:
    """Turn a polyline into exactly ``L`` segments.

    Longest segments are split at their midpoints to grow; a longer polyline
    is truncated to its first ``L`` segments; a degenerate polyline becomes
    ``L`` zero-length segments.
    """
    pts = [np.asarray(p, dtype=float) for p in points]
    # drop repeated points
    dedup = [pts[0]]
    for p in pts[1:]:
        if np.linalg.norm(p - dedup[-1]) > 1e-12:
            dedup.append(p)
    pts = dedup
    if len(pts) == 1:
        return np.repeat(pts[0][None], L + 1, axis=0)
    if len(pts) - 1 > L:
        pts = pts[:L + 1]
    while len(pts) - 1 < L:
        lengths = [np.linalg.norm(pts[k + 1] - pts[k]) for k in range(len(pts) - 1)]
        k = int(np.argmax(lengths))
        pts.insert(k + 1, 0.5 * (pts[k] + pts[k + 1]))
    return np.array(pts)


def assign_durations(waypoints, total: float, dt: float) -> np.ndarray:
    """Split ``total`` across segments in proportion to their lengths.

    Zero-length segments get ``total / (10 L)`` (all of them share equally
    when every segment is degenerate); the first segment is then raised to at
    least ``dt`` and the rest rescaled to keep the sum.
    """
    lengths = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    L = len(lengths)
    zero = lengths <= 1e-12
    if np.all(zero):
        dur = np.full(L, total / L)
    else:
        dur = np.empty(L)
        dur[zero] = total / (10 * L)
        rest = total - dur[zero].sum()
        dur[~zero] = rest * lengths[~zero] / lengths[~zero].sum()
    if dur[0] < dt and L > 1:
        others = dur[1:].sum()
        dur[0] = dt
        dur[1:] *= (total - dt) / others
    return dur


def _search_points(start, goal, grid, shape, workspace, clearance, robots) -> list:
    slo, shi = shape.aabb()
    if robots is not None and len(robots):
        rlo = np.array([np.min(r, axis=0) for r in robots]) - shi - clearance
        rhi = np.array([np.max(r, axis=0) for r in robots]) - slo + clearance
    else:
        rlo = rhi = None

    def free(a, b):
        # the robot itself may sit closer than a full clearance to obstacles
        c = 0.5 * clearance if a is start else clearance
        if not segment_free(grid, shape, workspace, a, b, c):
            return False
        return rlo is None or not np.any(_segment_hits_boxes(a, b, rlo, rhi))

    if np.linalg.norm(goal - start) <= 1e-12:
        return [start]
    if free(start, goal):
        return [start, goal]
    blocked = grid.blocked_cells(shape, workspace, clearance)
    if rlo is not None:
        blocked = blocked | _centres_inside(grid, rlo, rhi)
    s_cell = grid.cell_of(start)
    if blocked[s_cell]:
        blocked = blocked.copy()
        blocked[s_cell] = False
    cells, reached = astar(grid, blocked, s_cell, grid.cell_of(goal))
    points = [start] + [grid.center(c) for c in cells]
    if reached:
        points.append(goal)
    return shortcut(points, free)


def discrete_search(start, goal, grid: OccupancyGrid, shape: ConvexShape,
                    workspace: Workspace | None, L: int, tau_actual: float, dt: float,
                    v_max: float, clearance: float = DEFAULT_CLEARANCE,
                    robots=None, keep_within: ConvexPolytope | None = None) -> DiscretePlan:
    """Collision-free ``L``-segment path from ``start`` towards ``goal`` with durations.

    The direct segment is used when its swept hull is free. Otherwise A* runs
    on the grid inflated by the robot shape, the cell path is greedily
    shortcut, and the result resized to exactly ``L`` segments. The total
    duration is ``max(tau_actual, length / v_max, dt)``.

    ``robots`` optionally lists vertex arrays of other robots; their
    bounding boxes are avoided like occupied cells. The cell holding
    ``start`` is always treated as free so a robot hugging an obstacle can
    still leave. If the robots leave no free first step, the search is
    repeated without them; if even that fails the plan holds the start
    position.

    ``keep_within`` truncates the path where it first leaves that polytope
    (the half-spaces shared with other robots), so every segment can be
    enclosed by a non-empty corridor polytope. The far end of the cut
    segment is kept as the plan's ``target``.
    """
    if L < 1:
        raise ValueError("need at least one segment")
    if not v_max > 0:
        raise ValueError("v_max must be positive")
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)

    points = _search_points(start, goal, grid, shape, workspace, clearance, robots)
    if len(points) == 1 and robots is not None and len(robots):
        # boxed in by robots: aim straight for the goal and let the corridor keep the gap
        points = _search_points(start, goal, grid, shape, workspace, clearance, None)
    target = points[-1]
    if keep_within is not None and len(keep_within):
        clipped = clip_polyline(points, keep_within)
        # aim for the vertex the cut segment was heading to
        target = points[min(max(len(clipped) - 1, 1), len(points) - 1)]
        points = clipped
    wp = resize_segments(points, L)
    length = float(np.sum(np.linalg.norm(np.diff(wp, axis=0), axis=1)))
    total = max(tau_actual, length / v_max, dt)
    return DiscretePlan(wp, assign_durations(wp, total, dt), target)

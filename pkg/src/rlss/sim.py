"""Lockstep multi-robot replanning simulator and run metrics."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corridor import ObstacleSet
from .geometry import ConvexShape, PiecewiseTrajectory, boxes_overlap, convex_sets_intersect
from .planner import DesiredTrajectory, OccupancyGrid, shape_free
from .replan import PlanState, RobotConfig, Strategy, plan_iteration

EPS_GOAL = 1e-2
SAMPLE_PERIOD = 0.01
DEADLOCK_WINDOW = 5.0
DEADLOCK_EPS = 1e-2


@dataclass
class RobotSpec:
    config: RobotConfig
    start: np.ndarray
    desired: DesiredTrajectory

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)


@dataclass
class Scenario:
    """A grid, a team of robots and the run settings.

    ``sensing_range=None`` means every robot sees every other robot.
    ``position_noise`` is the half-width of a uniform perturbation added to
    each sensed self position (0 gives perfect sensing).
    """

    grid: OccupancyGrid
    robots: list
    strategy: Strategy = Strategy.HARD_SOFT
    duration_cap: float = 60.0
    sensing_range: float | None = None
    position_noise: float = 0.0
    seed: int = 0
    name: str = "scenario"
    meta: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.robots[0].config.dt

    def validate(self):
        """Raise ``ValueError`` naming the offending robot when a start is invalid."""
        if not self.robots:
            raise ValueError("robots: at least one robot is required")
        dts = {r.config.dt for r in self.robots}
        if len(dts) != 1:
            raise ValueError("robots: all robots must share one replanning period dt")
        for i, r in enumerate(self.robots):
            if r.start.size != self.grid.dim or r.config.dim != self.grid.dim:
                raise ValueError(f"robots[{i}]: dimension does not match the grid")
            if r.config.workspace is not None and not np.all(
                    r.config.workspace.residuals(r.config.shape.at(r.start)) <= 1e-9):
                raise ValueError(f"robots[{i}].start: shape leaves the workspace")
            if not shape_free(self.grid, r.config.shape, None, r.start, 0.0):
                raise ValueError(f"robots[{i}].start: collides with an occupied cell")
        for i in range(len(self.robots)):
            for j in range(i + 1, len(self.robots)):
                a, b = self.robots[i], self.robots[j]
                if shapes_intersect(a.config.shape, a.start, b.config.shape, b.start):
                    raise ValueError(f"robots[{i}].start: overlaps robots[{j}].start")


@dataclass
class IterationRecord:
    step: int
    robot: int
    ok: bool
    failed_stage: str | None
    soft_used: bool
    rescales: int
    hard_failures: int
    skipped: int
    elapsed_ms: float


@dataclass
class Trace:
    """Everything a run produced.

    ``commits[i]`` lists ``(time, trajectory)`` pairs of robot ``i``.
    ``positions[k, i]`` is robot ``i`` at ``times[k]``; the per-sample flag
    arrays repeat the record of the iteration in effect at that time.
    """

    dt: float
    sample_period: float
    end_time: float
    hit_cap: bool
    commits: list
    records: list
    times: np.ndarray
    positions: np.ndarray
    failed_stage: np.ndarray
    soft_used: np.ndarray
    rescales: np.ndarray
    goals: np.ndarray

    @property
    def n_robots(self) -> int:
        return self.positions.shape[1]


@dataclass
class RunMetrics:
    collisions: int
    robot_collisions: int
    obstacle_collisions: int
    deadlocks: int
    deadlocked: list
    total_distance: float
    goal_reached: list
    max_ms: list
    avg_ms: list
    iterations: int
    failures: dict
    soft_iterations: int
    end_time: float
    hit_cap: bool

    def summary(self) -> dict:
        return {
            "collisions": self.collisions,
            "robot_collisions": self.robot_collisions,
            "obstacle_collisions": self.obstacle_collisions,
            "deadlocks": self.deadlocks,
            "total_distance": self.total_distance,
            "goals_reached": int(sum(self.goal_reached)),
            "max_ms": max(self.max_ms, default=0.0),
            "avg_ms": float(np.mean(self.avg_ms)) if self.avg_ms else 0.0,
            "iterations": self.iterations,
            "failures": dict(self.failures),
            "soft_iterations": self.soft_iterations,
            "end_time": self.end_time,
            "hit_cap": self.hit_cap,
        }


def shapes_intersect(shape_a: ConvexShape, pa, shape_b: ConvexShape, pb, tol: float = 1e-9) -> bool:
    if shape_a.is_box and shape_b.is_box:
        la, ha = shape_a.aabb(pa)
        lb, hb = shape_b.aabb(pb)
        return boxes_overlap(la, ha, lb, hb, tol)
    return convex_sets_intersect(shape_a.at(pa), shape_b.at(pb), tol)


def _sense(i, positions, shapes, sensing_range):
    out = []
    for j, p in enumerate(positions):
        if j == i:
            continue
        if sensing_range is not None and np.linalg.norm(p - positions[i]) > sensing_range:
            continue
        out.append(shapes[j].at(p))
    return out


def _settled(states, robots, now):
    for st, r in zip(states, robots):
        end = r.desired.end_point()
        if now < r.desired.total_duration:
            return False
        if np.linalg.norm(st.position_at(now) - end) > EPS_GOAL:
            return False
        if st.trajectory is not None and np.linalg.norm(st.trajectory.end_point() - end) > EPS_GOAL:
            return False
    return True


def _snap_start(traj: PiecewiseTrajectory, p) -> PiecewiseTrajectory:
    # the first control point is fixed by an equality; make it exact
    first = traj.pieces[0]
    cp = first.control_points.copy()
    cp[0] = p
    return PiecewiseTrajectory([type(first)(cp, first.duration)] + list(traj.pieces[1:]))


def run(scn: Scenario, sample_period: float = SAMPLE_PERIOD, progress=None):
    """Simulate until every robot holds its final goal or the duration cap is hit.

    Each step every robot senses the others (within range) and the grid,
    replans, and all robots then follow their committed trajectories for
    ``dt``. A failed replan keeps the previous trajectory.

    Returns
    -------
    (RunMetrics, Trace)
    """
    scn.validate()
    robots = scn.robots
    n = len(robots)
    dt = scn.dt
    obstacles = ObstacleSet.from_grid(scn.grid)
    shapes = [r.config.shape for r in robots]
    states = [PlanState.at_rest(r.start) for r in robots]
    commits = [[] for _ in range(n)]
    records = []
    rng = np.random.default_rng(scn.seed)
    step = 0
    hit_cap = False
    while True:
        now = step * dt
        if _settled(states, robots, now):
            break
        if now >= scn.duration_cap - 1e-12:
            hit_cap = True
            break
        positions = [st.position_at(now) for st in states]
        sensed = positions
        if scn.position_noise > 0:
            sensed = [p + rng.uniform(-scn.position_noise, scn.position_noise, p.shape)
                      for p in positions]
        new_states = []
        for i, r in enumerate(robots):
            others = _sense(i, sensed, shapes, scn.sensing_range)
            t0 = time.perf_counter()
            res = plan_iteration(sensed[i], r.desired, scn.grid, others, r.config, states[i], now,
                                 scn.strategy, obstacles)
            ms = 1e3 * (time.perf_counter() - t0)
            records.append(IterationRecord(step, i, res.ok, res.failed_stage, res.soft_used,
                                           res.rescales, res.hard_failures, len(res.skipped), ms))
            if res.ok:
                traj = _snap_start(res.trajectory, sensed[i])
                commits[i].append((now, traj))
                new_states.append(PlanState(traj, now, positions[i]))
            else:
                new_states.append(states[i])
        states = new_states
        step += 1
        if progress is not None:
            progress(step, now)
    end_time = step * dt
    trace = _sample(commits, records, robots, dt, end_time, hit_cap, sample_period)
    return compute_metrics(trace, shapes, scn.grid, records), trace


def _sample(commits, records, robots, dt, end_time, hit_cap, period) -> Trace:
    n = len(robots)
    d = robots[0].start.size
    k = np.arange(int(np.ceil(end_time / period - 1e-9)))
    times = k * period
    times = times[times < end_time - 1e-12]
    S = times.size
    pos = np.empty((S, n, d))
    stage = np.full((S, n), "", dtype=object)
    soft = np.zeros((S, n), dtype=bool)
    resc = np.zeros((S, n), dtype=int)
    steps = np.floor(times / dt + 1e-9).astype(int)
    by_step = {(rec.step, rec.robot): rec for rec in records}
    for i, r in enumerate(robots):
        ct = np.array([c[0] for c in commits[i]])
        idx = np.searchsorted(ct, times + 1e-9, side="right") - 1
        for c in np.unique(idx):
            sel = idx == c
            if c < 0:
                pos[sel, i] = r.start
            else:
                t0, traj = commits[i][c]
                pos[sel, i] = traj.eval(times[sel] - t0)
        for s in np.unique(steps):
            rec = by_step.get((int(s), i))
            if rec is None:
                continue
            sel = steps == s
            stage[sel, i] = rec.failed_stage or ""
            soft[sel, i] = rec.soft_used
            resc[sel, i] = rec.rescales
    goals = np.array([r.desired.end_point() for r in robots])
    return Trace(dt, period, end_time, hit_cap, commits, records, times, pos, stage, soft, resc,
                 goals)


def count_collisions(positions, shapes, grid: OccupancyGrid, tol: float = 1e-9):
    """Count intersecting robot pairs plus robot/occupied-cell pairs summed over samples.

    ``positions`` has shape ``(samples, robots, dim)``. Returns
    ``(total, robot_robot, robot_obstacle)``.
    """
    positions = np.asarray(positions, dtype=float)
    S, n, _ = positions.shape
    if S == 0:
        return 0, 0, 0
    lo = np.stack([positions[:, i] + s.vertices.min(0) for i, s in enumerate(shapes)], axis=1)
    hi = np.stack([positions[:, i] + s.vertices.max(0) for i, s in enumerate(shapes)], axis=1)
    all_boxes = all(s.is_box for s in shapes)
    rr = 0
    for i in range(n):
        for j in range(i + 1, n):
            ov = boxes_overlap(lo[:, i], hi[:, i], lo[:, j], hi[:, j], tol)
            if all_boxes:
                rr += int(ov.sum())
            else:
                for k in np.flatnonzero(ov):
                    rr += convex_sets_intersect(shapes[i].at(positions[k, i]),
                                                shapes[j].at(positions[k, j]), tol)
    ro = 0
    olo, ohi = grid.occupied_lo, grid.occupied_hi
    if len(olo):
        chunk = max(1, 2_000_000 // max(1, len(olo) * positions.shape[2]))
        for i in range(n):
            for a in range(0, S, chunk):
                l, h = lo[a:a + chunk, i, None], hi[a:a + chunk, i, None]
                ov = boxes_overlap(l, h, olo, ohi, tol)
                if shapes[i].is_box:
                    ro += int(ov.sum())
                else:
                    for k, c in zip(*np.nonzero(ov)):
                        ro += convex_sets_intersect(shapes[i].at(positions[a + k, i]),
                                                    grid.obstacle_vertices(c).vertices, tol)
    return rr + ro, rr, ro


def detect_deadlock(positions, times, goals, hit_cap: bool, window: float = DEADLOCK_WINDOW,
                    eps: float = DEADLOCK_EPS) -> list:
    """Flag robots that ended a capped run away from their goal and nearly still.

    Displacement is measured between the last sample and the sample
    ``window`` seconds before it.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[1]
    if not hit_cap or len(times) == 0:
        return [False] * n
    last = positions[-1]
    k0 = int(np.searchsorted(times, times[-1] - window - 1e-9))
    moved = np.linalg.norm(last - positions[k0], axis=1)
    away = np.linalg.norm(last - np.asarray(goals), axis=1) > EPS_GOAL
    return [bool(a and m < eps) for a, m in zip(away, moved)]


def path_length(positions) -> float:
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(positions, axis=0), axis=-1).sum())


def final_positions(trace: Trace) -> np.ndarray:
    """Positions at the end time, read from the last commit of each robot."""
    out = []
    for i, commits in enumerate(trace.commits):
        if commits:
            t0, traj = commits[-1]
            out.append(traj.eval(trace.end_time - t0))
        else:
            out.append(trace.positions[0, i] if len(trace.times) else np.full(trace.goals.shape[1], np.nan))
    return np.array(out)


def compute_metrics(trace: Trace, shapes, grid: OccupancyGrid, records=None) -> RunMetrics:
    total, rr, ro = count_collisions(trace.positions, shapes, grid)
    deadlocked = detect_deadlock(trace.positions, trace.times, trace.goals, trace.hit_cap)
    if len(trace.times):
        last = trace.positions[-1]
        reached = [bool(np.linalg.norm(p - g) <= EPS_GOAL) or not trace.hit_cap
                   for p, g in zip(last, trace.goals)]
    else:
        reached = [not trace.hit_cap] * len(shapes)
    records = trace.records if records is None else records
    n = len(shapes)
    max_ms, avg_ms, failures = [], [], {}
    for i in range(n):
        ms = [r.elapsed_ms for r in records if r.robot == i]
        max_ms.append(max(ms, default=0.0))
        avg_ms.append(float(np.mean(ms)) if ms else 0.0)
    for r in records:
        if r.failed_stage:
            failures[r.failed_stage] = failures.get(r.failed_stage, 0) + 1
    return RunMetrics(
        collisions=int(total), robot_collisions=int(rr), obstacle_collisions=int(ro),
        deadlocks=int(sum(deadlocked)), deadlocked=deadlocked,
        total_distance=sum(path_length(trace.positions[:, i]) for i in range(n)),
        goal_reached=reached, max_ms=max_ms, avg_ms=avg_ms, iterations=len(records),
        failures=failures, soft_iterations=sum(r.soft_used for r in records),
        end_time=trace.end_time, hit_cap=trace.hit_cap)


def continuity_errors(trace: Trace, order: int) -> tuple[float, float]:
    """Largest derivative jump (orders ``0..order``) at piece junctions and at commit boundaries."""
    piece_err = 0.0
    commit_err = 0.0
    for commits in trace.commits:
        for t0, traj in commits:
            for a, b in zip(traj.pieces[:-1], traj.pieces[1:]):
                for k in range(order + 1):
                    da = a.derivative(k) if k else a
                    db = b.derivative(k) if k else b
                    piece_err = max(piece_err, float(np.max(np.abs(da(a.duration) - db(0.0)))))
        for (t_prev, prev), (t_new, new) in zip(commits[:-1], commits[1:]):
            before = prev.derivatives_at(t_new - t_prev, order)
            after = new.derivatives_at(0.0, order)
            commit_err = max(commit_err, float(np.max(np.abs(before - after))))
    return piece_err, commit_err

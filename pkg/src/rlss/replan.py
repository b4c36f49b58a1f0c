"""Trajectory optimisation, validity check and the per-robot replanning step."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp

from . import qp
from .corridor import (
    CorridorError,
    ObstacleSet,
    SafeCorridor,
    as_obstacles,
    build_corridor,
    robot_halfspaces,
)
from .geometry import (
    BezierPiece,
    ConvexPolytope,
    ConvexShape,
    PiecewiseTrajectory,
    derivative_matrix,
)
from .planner import (
    DEFAULT_CLEARANCE,
    DesiredTrajectory,
    DiscretePlan,
    OccupancyGrid,
    SearchError,
    discrete_search,
    select_goal,
)


class Strategy(enum.Enum):
    HARD = "hard"
    HARD_SOFT = "hard_soft"


@dataclass
class RobotConfig:
    """Per-robot planning parameters.

    ``derivative_limits[k-1]`` bounds the k-th derivative magnitude.
    ``energy_weights`` maps derivative order to its weight in the energy
    term. ``deviation_weights`` has one weight per piece; by default the
    final piece gets 100 and the others 1. ``soft_weight`` defaults to
    ``1e4 * max(energy_weights)``. ``prune_radius`` fixes the distance
    within which obstacles are separated from a segment; by default it is
    ``v_max * T_j + diameter`` per piece, and ``inf`` disables pruning.
    With ``quick_arrival`` a robot whose goal is the desired endpoint plans
    to arrive in ``max(2 dt, 3 * distance / v_max)`` seconds (never past the
    horizon, never before the desired end time) instead of a full horizon.
    """

    shape: ConvexShape
    workspace: ConvexPolytope | None = None
    continuity: int = 2
    derivative_limits: tuple = (2.0, 4.0)
    dt: float = 0.2
    horizon: float = 2.5
    pieces: int = 4
    degrees: tuple | int = 5
    energy_weights: dict = field(default_factory=lambda: {1: 1.0, 2: 0.2})
    deviation_weights: tuple | None = None
    rescale_factor: float = 1.5
    soft_weight: float | None = None
    max_rescales: int = 5
    clearance: float = DEFAULT_CLEARANCE
    goal_resolution: float | None = None
    prune_radius: float | None = None
    quick_arrival: bool = True

    def __post_init__(self):
        if isinstance(self.degrees, int):
            self.degrees = (self.degrees,) * self.pieces
        self.degrees = tuple(int(h) for h in self.degrees)
        self.derivative_limits = tuple(float(g) for g in self.derivative_limits)
        self.energy_weights = {int(k): float(v) for k, v in self.energy_weights.items()}
        if self.deviation_weights is None:
            self.deviation_weights = (1.0,) * (self.pieces - 1) + (100.0,)
        self.deviation_weights = tuple(float(t) for t in self.deviation_weights)
        if self.soft_weight is None:
            self.soft_weight = 1e4 * max(self.energy_weights.values(), default=1.0)
        if self.goal_resolution is None:
            self.goal_resolution = self.dt / 4
        self.validate()

    def validate(self):
        if self.pieces < 1:
            raise ValueError("pieces must be at least 1")
        if len(self.degrees) != self.pieces:
            raise ValueError("need one degree per piece")
        if any(h < self.continuity + 1 for h in self.degrees):
            raise ValueError("every piece degree must be at least continuity + 1")
        if len(self.deviation_weights) != self.pieces:
            raise ValueError("need one deviation weight per piece")
        if any(t < 0 for t in self.deviation_weights) or any(
                v < 0 for v in self.energy_weights.values()):
            raise ValueError("weights must be non-negative")
        if not self.derivative_limits or any(g <= 0 for g in self.derivative_limits):
            raise ValueError("derivative limits must be positive (at least a velocity limit)")
        if not self.rescale_factor > 1:
            raise ValueError("rescale factor must exceed 1")
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        if self.continuity < 0:
            raise ValueError("continuity order must be non-negative")
        if self.prune_radius is not None and not self.prune_radius > 0:
            raise ValueError("prune radius must be positive")

    @property
    def v_max(self) -> float:
        return self.derivative_limits[0]

    @property
    def dim(self) -> int:
        return self.shape.dim


@dataclass
class PlanState:
    """The committed trajectory and the time it was committed."""

    trajectory: PiecewiseTrajectory | None
    commit_time: float
    position: np.ndarray

    @classmethod
    def at_rest(cls, position) -> "PlanState":
        return cls(None, 0.0, np.asarray(position, dtype=float))

    def derivatives(self, now: float, order: int) -> np.ndarray:
        """Rows 0..order of the committed trajectory at global time ``now``."""
        if self.trajectory is None:
            out = np.zeros((order + 1, self.position.size))
            out[0] = self.position
            return out
        return self.trajectory.derivatives_at(max(0.0, now - self.commit_time), order)

    def position_at(self, now: float) -> np.ndarray:
        return self.derivatives(now, 0)[0]


# --------------------------------------------------------------------------
# Objective


def bernstein_gram(m: int, T: float) -> np.ndarray:
    """``G[a, b] = integral over [0, T] of B_a B_b`` for the degree-``m`` basis."""
    G = np.empty((m + 1, m + 1))
    for a in range(m + 1):
        for b in range(m + 1):
            G[a, b] = T * comb(m, a) * comb(m, b) / ((2 * m + 1) * comb(2 * m, a + b))
    return G


def _layout(degrees):
    offs = np.concatenate([[0], np.cumsum([h + 1 for h in degrees])]).astype(int)
    return offs


def build_objective(plan: DiscretePlan, cfg: RobotConfig):
    """Quadratic form ``(Q, q)`` with ``cost(x) = x'Qx + q'x + const``.

    ``x`` stacks the control points of all pieces, coordinates innermost.
    The energy part is the weighted sum of squared derivative integrals;
    the deviation part pulls each piece's last control point to its segment
    endpoint, and the final piece's to the plan's ``target``.
    """
    d = plan.waypoints.shape[1]
    degrees = cfg.degrees
    offs = _layout(degrees)
    N = offs[-1]
    H = np.zeros((N, N))
    qa = np.zeros((N, d))
    for j, (h, T) in enumerate(zip(degrees, plan.durations)):
        sl = slice(offs[j], offs[j + 1])
        for k, lam in cfg.energy_weights.items():
            if lam == 0 or k > h:
                continue
            D = derivative_matrix(h, k, T)
            H[sl, sl] += lam * D.T @ bernstein_gram(h - k, T) @ D
        theta = cfg.deviation_weights[j]
        last = offs[j + 1] - 1
        H[last, last] += theta
        aim = plan.target if j == len(degrees) - 1 else plan.waypoints[j + 1]
        qa[last] -= 2.0 * theta * aim
    H = 0.5 * (H + H.T)
    Q = sp.kron(sp.csr_matrix(H), sp.identity(d), format="csc")
    return Q, qa.ravel()


# --------------------------------------------------------------------------
# Constraints


@dataclass
class TrajectoryQp:
    problem: qp.QpProblem
    degrees: tuple
    durations: np.ndarray
    dim: int
    n_slack: int
    soft: bool

    @property
    def n_control(self) -> int:
        return self.problem.n - self.n_slack

    def trajectory(self, x) -> PiecewiseTrajectory:
        offs = _layout(self.degrees)
        cp = np.asarray(x[:self.n_control]).reshape(-1, self.dim)
        return PiecewiseTrajectory(
            [BezierPiece(cp[offs[j]:offs[j + 1]], T) for j, T in enumerate(self.durations)])


def _continuity_rows(cfg: RobotConfig, durations, d):
    """Equality rows (per axis, before expansion) for initial and junction derivatives."""
    offs = _layout(cfg.degrees)
    N = offs[-1]
    init, junc = [], []
    h0, T0 = cfg.degrees[0], durations[0]
    for k in range(cfg.continuity + 1):
        r = np.zeros(N)
        r[offs[0]:offs[1]] = derivative_matrix(h0, k, T0)[0]
        init.append(r)
    for j in range(len(cfg.degrees) - 1):
        ha, Ta = cfg.degrees[j], durations[j]
        hb, Tb = cfg.degrees[j + 1], durations[j + 1]
        for k in range(cfg.continuity + 1):
            r = np.zeros(N)
            r[offs[j]:offs[j + 1]] = derivative_matrix(ha, k, Ta)[-1]
            r[offs[j + 1]:offs[j + 2]] -= derivative_matrix(hb, k, Tb)[0]
            junc.append(r)
    return np.array(init), np.array(junc).reshape(-1, N)


def build_constraints(plan: DiscretePlan, corridor: SafeCorridor, cfg: RobotConfig,
                      state_derivatives, mode: str = "hard") -> TrajectoryQp:
    """Assemble the full QP (objective included) for one optimisation attempt.

    Equalities fix derivatives ``0..c`` of the first piece to
    ``state_derivatives`` and make derivatives ``0..c`` continuous at each
    junction. Every control point of piece ``j`` must satisfy every
    half-space of polytope ``j``. In ``"soft"`` mode each non-workspace
    half-space row gets its own slack ``s >= 0`` penalised by
    ``soft_weight * s^2``.
    """
    if len(corridor) != plan.n_segments:
        raise ValueError("corridor and plan disagree on the number of pieces")
    if mode not in ("hard", "soft"):
        raise ValueError(f"unknown mode {mode!r}")
    d = plan.waypoints.shape[1]
    offs = _layout(cfg.degrees)
    n_cp = offs[-1] * d
    Q, q = build_objective(plan, cfg)

    init, junc = _continuity_rows(cfg, plan.durations, d)
    I_d = np.eye(d)
    A_eq = np.vstack([np.kron(init, I_d), np.kron(junc, I_d)]) if len(junc) else np.kron(init, I_d)
    b_eq = np.concatenate([np.asarray(state_derivatives, float)[:cfg.continuity + 1].ravel(),
                           np.zeros(len(junc) * d)])

    rows, cols, vals, rhs, soft_rows = [], [], [], [], []
    r = 0
    for j, poly in enumerate(corridor.polytopes):
        if not len(poly):
            continue
        A = poly.A
        b = poly.b
        softable = np.array([kind != "workspace" for kind, _ in corridor.provenance[j]])
        for k in range(cfg.degrees[j] + 1):
            base = (offs[j] + k) * d
            m = len(b)
            rr = r + np.repeat(np.arange(m), d)
            cc = base + np.tile(np.arange(d), m)
            rows.append(rr)
            cols.append(cc)
            vals.append(A.ravel())
            rhs.append(-b)
            soft_rows.append(r + np.flatnonzero(softable))
            r += m
    n_slack = 0
    if r:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        rhs = np.concatenate(rhs)
        soft_rows = np.concatenate(soft_rows).astype(int)
    else:
        rows = cols = np.zeros(0, dtype=int)
        vals = rhs = np.zeros(0)
        soft_rows = np.zeros(0, dtype=int)

    P = 2.0 * Q
    if mode == "soft" and soft_rows.size:
        n_slack = soft_rows.size
        slack_ids = n_cp + np.arange(n_slack)
        rows = np.concatenate([rows, soft_rows, r + np.arange(n_slack)])
        cols = np.concatenate([cols, slack_ids, slack_ids])
        vals = np.concatenate([vals, -np.ones(n_slack), -np.ones(n_slack)])
        rhs = np.concatenate([rhs, np.zeros(n_slack)])
        r += n_slack
        P = sp.block_diag([P, 2.0 * cfg.soft_weight * sp.identity(n_slack)], format="csc")
        q = np.concatenate([q, np.zeros(n_slack)])
        A_eq = np.hstack([A_eq, np.zeros((A_eq.shape[0], n_slack))])
    n = n_cp + n_slack
    A_in = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
    problem = qp.QpProblem(P, q, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=rhs)
    return TrajectoryQp(problem, cfg.degrees, plan.durations.copy(), d, n_slack, mode == "soft")


# --------------------------------------------------------------------------
# Validity and rescaling


@dataclass
class ValidityReport:
    valid: bool
    bounds: tuple
    limits: tuple

    @property
    def excess(self) -> dict:
        """Orders whose bound exceeds the limit, with the offending bound."""
        return {k + 1: b for k, (b, g) in enumerate(zip(self.bounds, self.limits)) if b > g}


def derivative_bound(traj: PiecewiseTrajectory, order: int) -> float:
    """Upper bound on ``max_t |d^k f / dt^k|`` from hodograph control points."""
    best = 0.0
    for piece in traj.pieces:
        hod = piece.derivative(order)
        best = max(best, float(np.max(np.linalg.norm(hod.control_points, axis=1))))
    return best


def validity_check(traj: PiecewiseTrajectory, cfg: RobotConfig, tol: float = 1e-9) -> ValidityReport:
    limits = cfg.derivative_limits
    bounds = tuple(derivative_bound(traj, k) for k in range(1, len(limits) + 1))
    valid = all(b <= g * (1 + tol) for b, g in zip(bounds, limits))
    return ValidityReport(valid, bounds, limits)


def temporal_rescale(plan: DiscretePlan, r: float) -> DiscretePlan:
    if not r > 1:
        raise ValueError("rescale factor must exceed 1")
    return DiscretePlan(plan.waypoints.copy(), plan.durations * r, plan.target)


# --------------------------------------------------------------------------
# Iteration driver


@dataclass
class IterationResult:
    trajectory: PiecewiseTrajectory | None
    failed_stage: str | None = None
    message: str = ""
    goal: np.ndarray | None = None
    horizon: float | None = None
    plan: DiscretePlan | None = None
    corridor: SafeCorridor | None = None
    soft_used: bool = False
    rescales: int = 0
    hard_failures: int = 0
    lazy_obstacles: int = 0
    skipped: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.trajectory is not None


def optimize(plan: DiscretePlan, corridor: SafeCorridor, cfg: RobotConfig, state_derivatives,
             mode: str, max_lazy_rounds: int = 5):
    """Solve one optimisation attempt, adding obstacle planes the result reaches.

    Returns ``(trajectory or None, QpSolution, lazily added planes)``.
    Pruned obstacles are re-checked against the bounding box of each piece's
    control points grown by the robot shape; overlaps get separating planes
    and the problem is solved again.
    """
    added = 0
    slo, shi = cfg.shape.aabb()
    for _ in range(max_lazy_rounds + 1):
        tq = build_constraints(plan, corridor, cfg, state_derivatives, mode)
        sol = qp.solve(tq.problem, check_psd=False, polish="repair")
        if not sol.ok:
            return None, sol, added
        traj = tq.trajectory(sol.x)
        if not len(corridor.obstacles):
            return traj, sol, added
        new = 0
        for j, piece in enumerate(traj.pieces):
            cp = piece.control_points
            near = corridor.obstacles.near(cp.min(0) + slo, cp.max(0) + shi, 0.0)
            known = corridor.obstacle_ids(j)
            extra = [int(i) for i in near if int(i) not in known
                     and ("obstacle", int(i)) not in corridor.skipped]
            if extra:
                new += corridor.add_obstacles(j, extra)
        if not new:
            return traj, sol, added
        added += new
    return None, sol, added


def arrival_horizon(desired: DesiredTrajectory, goal, position, now: float, horizon: float,
                    cfg: RobotConfig) -> float:
    """Shorter plan duration once the goal is the held desired endpoint.

    A full horizon makes the final approach geometric: each step covers a
    small fraction of the remaining gap. The rescaling loop stretches the
    duration again when the short one breaks a derivative limit.
    """
    t_end = desired.total_duration
    if now + horizon <= t_end or np.linalg.norm(goal - desired.end_point()) > 0:
        return horizon
    need = max(2.0 * cfg.dt, 3.0 * float(np.linalg.norm(goal - position)) / cfg.v_max)
    return max(t_end - now, min(horizon, need))


def plan_iteration(position, desired: DesiredTrajectory, grid: OccupancyGrid, other_robots,
                   cfg: RobotConfig, state: PlanState, now: float,
                   strategy: Strategy = Strategy.HARD_SOFT,
                   obstacles: ObstacleSet | None = None) -> IterationResult:
    """One replanning step: goal selection, discrete search, optimisation, validity check.

    ``other_robots`` are the sensed shapes of the other robots in world
    coordinates. Initial derivatives above order 0 come from the committed
    trajectory in ``state``; order 0 is the sensed ``position``. On
    solver failure or a derivative-limit violation the piece durations are
    multiplied by ``cfg.rescale_factor`` and the optimisation repeated, at
    most ``cfg.max_rescales`` times. With ``Strategy.HARD_SOFT`` every
    failed hard solve is retried with soft safety constraints first.

    A failed iteration returns ``trajectory=None`` with ``failed_stage`` set;
    the caller keeps its previous trajectory.
    """
    position = np.asarray(position, dtype=float)
    obs = as_obstacles(grid) if obstacles is None else obstacles
    res = IterationResult(None)
    goal, horizon = select_goal(desired, grid, cfg.shape, cfg.workspace, now, cfg.horizon,
                                position, cfg.goal_resolution, cfg.clearance)
    if cfg.quick_arrival:
        horizon = arrival_horizon(desired, goal, position, now, horizon, cfg)
    res.goal, res.horizon = goal, horizon
    robot_planes = robot_halfspaces(cfg.shape, position, other_robots, cfg.clearance)
    try:
        plan = discrete_search(position, goal, grid, cfg.shape, cfg.workspace, cfg.pieces,
                               horizon, cfg.dt, cfg.v_max, cfg.clearance, robots=other_robots,
                               keep_within=ConvexPolytope(robot_planes[0]))
    except SearchError as e:
        res.failed_stage, res.message = "discrete_search", str(e)
        return res
    res.plan = plan
    try:
        corridor = build_corridor(plan, cfg.shape, obs, other_robots, cfg.workspace,
                                  cfg.v_max, cfg.clearance, robot_planes, cfg.prune_radius)
    except CorridorError as e:
        res.failed_stage, res.message = "corridor", str(e)
        return res
    res.corridor = corridor
    res.skipped = list(corridor.skipped)

    derivs = state.derivatives(now, cfg.continuity)
    derivs[0] = position
    stage = "optimization"
    for attempt in range(cfg.max_rescales + 1):
        traj, sol, added = optimize(plan, corridor, cfg, derivs, "hard")
        res.lazy_obstacles += added
        if traj is None:
            res.hard_failures += 1
            if strategy is Strategy.HARD_SOFT:
                traj, sol, added = optimize(plan, corridor, cfg, derivs, "soft")
                res.lazy_obstacles += added
                if traj is not None:
                    res.soft_used = True
        if traj is None:
            stage = "optimization"
            res.message = f"solver status {sol.status.value}"
        else:
            report = validity_check(traj, cfg)
            if report.valid:
                res.trajectory = traj
                res.plan = plan
                res.rescales = attempt
                return res
            stage = "validity"
            res.message = f"derivative bounds exceeded: {report.excess}"
            res.soft_used = False
        if attempt < cfg.max_rescales:
            plan = temporal_rescale(plan, cfg.rescale_factor)
    res.failed_stage = stage
    res.rescales = cfg.max_rescales
    return res

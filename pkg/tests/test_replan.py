import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import simpson_energy
from rlss import qp
from rlss.corridor import build_corridor
from rlss.geometry import BezierPiece, ConvexPolytope, ConvexShape, PiecewiseTrajectory
from rlss.planner import DesiredTrajectory, DiscretePlan, OccupancyGrid
from rlss.replan import (
    PlanState,
    RobotConfig,
    Strategy,
    bernstein_gram,
    build_constraints,
    build_objective,
    derivative_bound,
    plan_iteration,
    temporal_rescale,
    validity_check,
)

POINT2 = ConvexShape.point(2)


def energy(cp, T, weights):
    cfg = RobotConfig(shape=ConvexShape.point(cp.shape[1]), pieces=1, degrees=len(cp) - 1,
                      continuity=0, energy_weights=weights, deviation_weights=(0.0,))
    plan = DiscretePlan(np.zeros((2, cp.shape[1])), [T])
    Q, _ = build_objective(plan, cfg)
    x = cp.ravel()
    return float(x @ (Q @ x))


# --- objective ------------------------------------------------------------------

def test_gram_integrates_bernstein_products():
    from oracles import bernstein_sum
    from scipy.integrate import simpson
    m, T = 3, 1.7
    G = bernstein_gram(m, T)
    ts = np.linspace(0, T, 4001)
    for a in range(m + 1):
        for b in range(m + 1):
            ea, eb = np.eye(m + 1)[a][:, None], np.eye(m + 1)[b][:, None]
            va = np.array([bernstein_sum(ea, T, t)[0] for t in ts])
            vb = np.array([bernstein_sum(eb, T, t)[0] for t in ts])
            assert abs(G[a, b] - simpson(va * vb, x=ts)) <= 1e-9


def test_unit_velocity_energy():
    assert energy(np.array([[0.0, 0], [1, 0]]), 1.0, {1: 1.0}) == pytest.approx(1.0)


def test_stationary_curve_has_no_energy():
    cp = np.tile([2.0, -1.0], (6, 1))
    assert abs(energy(cp, 2.0, {1: 1.0, 2: 3.0, 3: 0.5})) <= 1e-12


@given(st.integers(0, 10 ** 6), st.integers(1, 3))
def test_energy_matches_simpson(seed, order):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(order, 8))
    cp = rng.normal(size=(h + 1, int(rng.integers(2, 4))))
    T = float(rng.uniform(0.3, 3))
    got = energy(cp, T, {order: 1.0})
    ref = simpson_energy(cp, T, order)
    assert abs(got - ref) <= 1e-6 * max(1.0, abs(ref))


def test_deviation_pulls_final_point_to_goal():
    cfg = RobotConfig(shape=POINT2, pieces=2, degrees=5, continuity=2,
                      deviation_weights=(1.0, 1e6))
    plan = DiscretePlan([[0, 0], [1, 0.5], [2, 1.0]], [1.0, 1.0])
    ws = ConvexPolytope.box([-10, -10], [10, 10])
    cor = build_corridor(plan, POINT2, [], [], ws)
    derivs = np.zeros((3, 2))
    tq = build_constraints(plan, cor, cfg, derivs, "hard")
    sol = qp.solve(tq.problem)
    assert sol.ok
    assert np.linalg.norm(tq.trajectory(sol.x).end_point() - [2, 1]) <= 1e-3


# --- constraints ----------------------------------------------------------------

def test_first_control_point_is_current_position():
    cfg = RobotConfig(shape=POINT2, pieces=1, degrees=3, continuity=0)
    plan = DiscretePlan([[0, 0], [1, 0]], [1.0])
    cor = build_corridor(plan, POINT2, [], [], None)
    tq = build_constraints(plan, cor, cfg, np.array([[0.3, -0.2]]), "hard")
    sol = qp.solve(tq.problem)
    assert np.allclose(tq.trajectory(sol.x).pieces[0].control_points[0], [0.3, -0.2], atol=1e-9)


def test_junction_continuity():
    cfg = RobotConfig(shape=POINT2, pieces=2, degrees=5, continuity=2)
    plan = DiscretePlan([[0, 0], [1, 1], [2, 0]], [0.7, 1.3])
    cor = build_corridor(plan, POINT2, [], [], ConvexPolytope.box([-5, -5], [5, 5]))
    derivs = np.array([[0, 0], [0.5, 0], [0, 0.1]])
    tq = build_constraints(plan, cor, cfg, derivs, "hard")
    sol = qp.solve(tq.problem)
    tr = tq.trajectory(sol.x)
    a, b = tr.pieces
    for k in range(3):
        ja = (a.derivative(k) if k else a)(a.duration)
        jb = (b.derivative(k) if k else b)(0.0)
        assert np.max(np.abs(ja - jb)) <= 1e-6
    assert np.max(np.abs(tr.derivatives_at(0.0, 2) - derivs)) <= 1e-6


def test_soft_mode_adds_slacks_but_keeps_workspace_hard():
    shape = POINT2
    ws = ConvexPolytope.box([-1, -1], [3, 1])
    cfg = RobotConfig(shape=shape, workspace=ws, pieces=2, degrees=4, continuity=1)
    plan = DiscretePlan([[0, 0], [1, 0], [2, 0]], [1.0, 1.0])
    cor = build_corridor(plan, shape, [np.array([[2.5, -0.5], [2.5, 0.5], [2.8, 0]])], [], ws)
    hard = build_constraints(plan, cor, cfg, np.zeros((2, 2)), "hard")
    soft = build_constraints(plan, cor, cfg, np.zeros((2, 2)), "soft")
    assert hard.n_slack == 0 and soft.n_slack > 0
    assert soft.n_control == hard.n_control
    # start outside the obstacle plane: hard fails, soft succeeds inside the workspace
    derivs = np.array([[2.45, 0.0], [0.0, 0.0]])
    h = qp.solve(build_constraints(plan, cor, cfg, derivs, "hard").problem)
    s_tq = build_constraints(plan, cor, cfg, derivs, "soft")
    s = qp.solve(s_tq.problem)
    assert not h.ok and s.ok
    cp = s_tq.trajectory(s.x).pieces
    for piece in cp:
        assert np.all(ws.residuals(piece.control_points) <= 1e-6)


# --- validity and rescaling -----------------------------------------------------

def test_stationary_is_valid():
    cfg = RobotConfig(shape=POINT2, derivative_limits=(1e-3, 1e-3))
    tr = PiecewiseTrajectory([BezierPiece(np.ones((6, 2)), 1.0)])
    assert validity_check(tr, cfg).valid


def test_velocity_excess_reported():
    cfg = RobotConfig(shape=POINT2, derivative_limits=(1.0,), continuity=0, degrees=1, pieces=1)
    tr = PiecewiseTrajectory([BezierPiece([[0, 0], [2, 0]], 1.0)])
    rep = validity_check(tr, cfg)
    assert not rep.valid and rep.excess == {1: pytest.approx(2.0)}


@given(st.integers(0, 10 ** 6))
def test_bound_is_conservative(seed):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(2, 8))
    p = BezierPiece(rng.normal(size=(h + 1, 3)), float(rng.uniform(0.2, 2)))
    tr = PiecewiseTrajectory([p])
    for k in (1, 2):
        sampled = np.linalg.norm(tr.eval(np.linspace(0, p.duration, 1001), order=k), axis=1).max()
        assert derivative_bound(tr, k) >= sampled - 1e-9


def test_rescale():
    plan = DiscretePlan([[0, 0], [1, 0], [3, 0]], [1.0, 2.0])
    r = temporal_rescale(plan, 1.5)
    assert np.allclose(r.durations, [1.5, 3.0]) and np.array_equal(r.waypoints, plan.waypoints)
    assert np.allclose(temporal_rescale(temporal_rescale(plan, 2), 2).durations, [4, 8])
    with pytest.raises(ValueError):
        temporal_rescale(plan, 1.0)


def test_rescaling_eventually_valid():
    # hodograph control points scale with 1/T, so r^m > bound / limit suffices
    p = BezierPiece([[0, 0], [1, 0], [3, 1], [4, 4]], 0.5)
    cfg = RobotConfig(shape=POINT2, derivative_limits=(1.0,), continuity=0, pieces=1, degrees=3)
    b0 = derivative_bound(PiecewiseTrajectory([p]), 1)
    m = int(np.ceil(np.log(b0) / np.log(cfg.rescale_factor)))
    scaled = BezierPiece(p.control_points, p.duration * cfg.rescale_factor ** m)
    assert validity_check(PiecewiseTrajectory([scaled]), cfg).valid


def test_config_validation():
    with pytest.raises(ValueError):
        RobotConfig(shape=POINT2, continuity=2, degrees=2)
    with pytest.raises(ValueError):
        RobotConfig(shape=POINT2, rescale_factor=1.0)
    with pytest.raises(ValueError):
        RobotConfig(shape=POINT2, derivative_limits=(0.0,))
    cfg = RobotConfig(shape=POINT2, pieces=3)
    assert cfg.deviation_weights == (1.0, 1.0, 100.0)
    assert cfg.soft_weight == pytest.approx(1e4)


# --- iteration driver -----------------------------------------------------------

def test_single_robot_reaches_goal_without_obstacle_planes():
    grid = OccupancyGrid(np.zeros((20, 20), bool), 0.5)
    ws = ConvexPolytope.box([0, 0], [10, 10])
    shape = ConvexShape.box([0.1, 0.1])
    cfg = RobotConfig(shape=shape, workspace=ws, derivative_limits=(2.0, 4.0),
                      deviation_weights=(1.0, 1.0, 1.0, 1e6))
    desired = DesiredTrajectory.from_waypoints([0, 2], [[1, 1], [2.5, 1]])
    res = plan_iteration([1, 1], desired, grid, [], cfg, PlanState.at_rest([1, 1]), 0.0)
    assert res.ok and res.corridor.count("obstacle") == 0
    assert np.linalg.norm(res.trajectory.end_point() - res.goal) <= 1e-3
    assert res.trajectory.total_duration >= cfg.dt


def test_head_on_pair_stays_on_own_side():
    grid = OccupancyGrid(np.zeros((20, 8), bool), 0.5)
    shape = ConvexShape.box([0.2, 0.2])
    cfg = RobotConfig(shape=shape, workspace=ConvexPolytope.box([0, 0], [10, 4]))
    a, b = np.array([4.0, 2.0]), np.array([6.0, 2.0])
    da = DesiredTrajectory.from_waypoints([0, 4], [a, [9, 2]])
    db = DesiredTrajectory.from_waypoints([0, 4], [b, [1, 2]])
    ra = plan_iteration(a, da, grid, [shape.at(b)], cfg, PlanState.at_rest(a), 0.0)
    rb = plan_iteration(b, db, grid, [shape.at(a)], cfg, PlanState.at_rest(b), 0.0)
    ts_a = np.linspace(0, ra.trajectory.total_duration, 2001)
    ts_b = np.linspace(0, rb.trajectory.total_duration, 2001)
    assert np.all(ra.trajectory.eval(ts_a)[:, 0] + 0.2 < 5.0)
    assert np.all(rb.trajectory.eval(ts_b)[:, 0] - 0.2 > 5.0)


def test_hard_failure_falls_back_to_soft():
    grid = OccupancyGrid(np.zeros((20, 20), bool), 0.5)
    shape = ConvexShape.box([0.2, 0.2])
    cfg = RobotConfig(shape=shape, workspace=ConvexPolytope.box([0, 0], [10, 10]))
    a = np.array([5.0, 5.0])
    other = shape.at([5.6, 5.0])
    # moving fast towards the other robot: cannot stop before the shared plane
    committed = PiecewiseTrajectory([BezierPiece([[4.5, 5], [5, 5], [5.5, 5]], 1.0)])
    state = PlanState(committed, 0.0, np.array([4.5, 5]))
    desired = DesiredTrajectory.from_waypoints([0, 3], [a, [9, 5]])
    hard = plan_iteration(a, desired, grid, [other], cfg, state, 0.5, Strategy.HARD)
    soft = plan_iteration(a, desired, grid, [other], cfg, state, 0.5, Strategy.HARD_SOFT)
    assert not hard.ok and hard.failed_stage == "optimization" and hard.hard_failures > 0
    assert soft.ok and soft.soft_used
    assert np.max(np.abs(soft.trajectory.derivatives_at(0.0, 2)
                         - np.vstack([a, state.derivatives(0.5, 2)[1:]]))) <= 1e-6


def test_iteration_deterministic():
    grid = OccupancyGrid(np.zeros((10, 10), bool), 0.5)
    cfg = RobotConfig(shape=ConvexShape.box([0.1, 0.1]), workspace=ConvexPolytope.box([0, 0], [5, 5]))
    d = DesiredTrajectory.from_waypoints([0, 3], [[1, 1], [4, 4]])
    r1 = plan_iteration([1, 1], d, grid, [], cfg, PlanState.at_rest([1, 1]), 0.0)
    r2 = plan_iteration([1, 1], d, grid, [], cfg, PlanState.at_rest([1, 1]), 0.0)
    for p, q in zip(r1.trajectory.pieces, r2.trajectory.pieces):
        assert np.array_equal(p.control_points, q.control_points)

"""Convex quadratic programs.

Problems have the form::

    minimize    0.5 x'Qx + q'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in

The interior-point solve is delegated to Clarabel. Around it sit the pieces
the planner relies on: a KKT check of every returned point, an active-set
polish that pushes equality residuals down to round-off, and a phase-1
feasibility problem that separates genuine infeasibility from numerical
trouble.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

EPS_QP = 1e-6
INFEASIBLE_VIOLATION = 1e-5
# interior-point methods converge in tens of steps; more means degeneracy
IPM_MAX_ITER = 100


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


def _as_matrix(a, n):
    if a is None:
        return np.zeros((0, n))
    if sp.issparse(a):
        return a.tocsr()
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, n)


def _as_vector(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(m)


class QpProblem:
    """Quadratic objective plus linear equality and inequality constraints.

    ``Q`` and the constraint matrices may be dense arrays or scipy sparse
    matrices. Missing constraint blocks are stored as empty matrices.
    """

    def __init__(self, Q, q, A_eq=None, b_eq=None, A_in=None, b_in=None):
        self.Q = Q.tocsc() if sp.issparse(Q) else np.asarray(Q, dtype=float)
        self.q = np.asarray(q, dtype=float).ravel()
        n = self.q.size
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        self.A_eq = _as_matrix(A_eq, n)
        self.b_eq = _as_vector(b_eq, self.A_eq.shape[0])
        self.A_in = _as_matrix(A_in, n)
        self.b_in = _as_vector(b_in, self.A_in.shape[0])
        asym = abs(self.Q - self.Q.T)
        asym = asym.max() if asym.shape[0] else 0.0
        if asym > 1e-9:
            raise ValueError(f"Q is not symmetric (max asymmetry {asym:.3g})")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_in.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            return float(0.5 * x @ (self.Q @ x) + self.q @ x)

    def violation(self, x) -> float:
        """Largest equality residual or inequality excess at ``x``."""
        x = np.asarray(x, dtype=float)
        v = 0.0
        if self.n_eq:
            v = max(v, float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        if self.n_in:
            v = max(v, float(np.max(self.A_in @ x - self.b_in)))
        return v

    def check_psd(self) -> None:
        Q = self.Q.toarray() if sp.issparse(self.Q) else self.Q
        if self.n == 0:
            return
        try:
            np.linalg.cholesky(Q + 1e-9 * max(1.0, np.abs(Q).max()) * np.eye(self.n))
        except np.linalg.LinAlgError:
            raise ValueError("Q is not positive semidefinite") from None


@dataclass
class QpSolution:
    x: np.ndarray
    status: QpStatus
    objective: float
    max_violation: float
    iterations: int = 0
    y_eq: np.ndarray = field(default=None, repr=False)
    z_in: np.ndarray = field(default=None, repr=False)
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def is_feasible_point(p: QpProblem, x, tol: float = EPS_QP) -> bool:
    """True iff every constraint of ``p`` holds at ``x`` within ``tol``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != p.n:
        raise ValueError(f"point has {x.size} entries, problem has {p.n} variables")
    return p.violation(x) <= tol


def iteration_cap(p: QpProblem) -> int:
    return 10 * (p.n + p.n_eq + p.n_in) + 1000


def kkt_residuals(p: QpProblem, x, y_eq, z_in) -> dict:
    """Stationarity, primal, dual and complementarity residuals (inf-norms)."""
    grad = p.Q @ x + p.q
    if p.n_eq:
        grad = grad + p.A_eq.T @ y_eq
    if p.n_in:
        grad = grad + p.A_in.T @ z_in
    slack = p.b_in - p.A_in @ x if p.n_in else np.zeros(0)
    return {
        "stationarity": float(np.max(np.abs(grad))) if p.n else 0.0,
        "primal": p.violation(x),
        "dual": float(max(0.0, -np.min(z_in))) if p.n_in else 0.0,
        "complementarity": float(np.max(np.abs(z_in * slack))) if p.n_in else 0.0,
    }


def _kkt_ok(p, x, y, z, tol):
    r = kkt_residuals(p, x, y, z)
    scale = 1.0 + float(np.max(np.abs(p.q), initial=0.0))
    return (r["primal"] <= tol and r["dual"] <= tol * scale
            and r["stationarity"] <= tol * scale
            and r["complementarity"] <= tol * scale)


def _clarabel(p: QpProblem, max_iter: int):
    n = p.n
    P = sp.triu(sp.csc_matrix(p.Q), format="csc")
    blocks, rhs, cones = [], [], []
    if p.n_eq:
        blocks.append(sp.csr_matrix(p.A_eq))
        rhs.append(p.b_eq)
        cones.append(clarabel.ZeroConeT(p.n_eq))
    if p.n_in:
        blocks.append(sp.csr_matrix(p.A_in))
        rhs.append(p.b_in)
        cones.append(clarabel.NonnegativeConeT(p.n_in))
    if not blocks:
        # Clarabel needs at least one cone; a trivially satisfied row will do.
        blocks.append(sp.csr_matrix((1, n)))
        rhs.append(np.ones(1))
        cones.append(clarabel.NonnegativeConeT(1))
    A = sp.vstack(blocks, format="csc")
    b = np.concatenate(rhs)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.tol_ktratio = 1e-8
    solver = clarabel.DefaultSolver(P, p.q, A, b, cones, settings)
    return solver.solve()


def _polish(p: QpProblem, x, z, delta=1e-11):
    """Re-solve the equality system of the guessed active set.

    Returns ``(x, y, z)`` or ``None`` when the guess yields negative
    multipliers or a singular system.
    """
    n = p.n
    if p.n_in:
        slack = p.b_in - p.A_in @ x
        zscale = max(1.0, float(np.max(z)))
        active = np.flatnonzero((z > 1e-7 * zscale) | (slack < 1e-9))
        active = active[z[active] > 1e-12 * zscale] if active.size else active
    else:
        active = np.zeros(0, dtype=int)
    A = sp.vstack([sp.csr_matrix(p.A_eq), sp.csr_matrix(p.A_in)[active]], format="csr")
    b = np.concatenate([p.b_eq, p.b_in[active]])
    m = A.shape[0]
    Q = sp.csc_matrix(p.Q)
    K0 = sp.bmat([[Q, A.T], [A, None]], format="csc")
    if m == 0:
        K0 = Q
    reg = sp.diags(np.concatenate([np.full(n, delta), np.full(m, -delta)]))
    rhs = np.concatenate([-p.q, b])
    try:
        lu = spla.splu(sp.csc_matrix(K0 + reg))
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(4):
        sol = sol + lu.solve(rhs - K0 @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    xp = sol[:n]
    y = sol[n:n + p.n_eq]
    zp = np.zeros(p.n_in)
    zp[active] = sol[n + p.n_eq:]
    if p.n_in and np.min(zp, initial=0.0) < -1e-9 * max(1.0, float(np.max(z))):
        return None
    zp = np.maximum(zp, 0.0)
    return xp, y, zp


def solve(p: QpProblem, *, check_psd: bool = True, polish: str = "always") -> QpSolution:
    """Solve ``p``.

    ``status`` is ``OPTIMAL`` only when the returned point passes an
    independent KKT check with primal violation at most ``EPS_QP``.
    A primal infeasibility certificate from the interior-point solver gives
    ``INFEASIBLE``. Any other outcome runs a phase-1 problem: a minimum total
    violation above ``INFEASIBLE_VIOLATION`` means ``INFEASIBLE``, otherwise
    the failure is reported as ``MAX_ITERATIONS``.

    Parameters
    ----------
    polish : {"always", "repair", "never"}
        ``"repair"`` polishes only points that fail the KKT check.
    """
    if polish not in ("always", "repair", "never"):
        raise ValueError(f"unknown polish mode {polish!r}")
    if check_psd:
        p.check_psd()
    n = p.n
    if n == 0:
        x = np.zeros(0)
        viol = p.violation(x) if (p.n_eq or p.n_in) else 0.0
        st = QpStatus.OPTIMAL if viol <= EPS_QP else QpStatus.INFEASIBLE
        return QpSolution(x, st, 0.0, viol)

    res = _clarabel(p, min(iteration_cap(p), IPM_MAX_ITER))
    status = str(res.status)
    x = np.array(res.x)
    zall = np.array(res.z)
    y = zall[:p.n_eq] if p.n_eq else np.zeros(0)
    z = zall[p.n_eq:p.n_eq + p.n_in] if p.n_in else np.zeros(0)
    iters = int(res.iterations)

    if status in ("Solved", "AlmostSolved") and np.all(np.isfinite(x)):
        polished = False
        if polish == "always" or (polish == "repair" and not (
                p.violation(x) <= EPS_QP and _kkt_ok(p, x, y, z, EPS_QP))):
            out = _polish(p, x, z)
            if out is not None:
                xp, yp, zp = out
                if (p.violation(xp) <= max(p.violation(x), 1e-9)
                        and p.objective(xp) <= p.objective(x) + 1e-9 * (1 + abs(p.objective(x)))):
                    x, y, z, polished = xp, yp, zp, True
        if p.violation(x) <= EPS_QP and _kkt_ok(p, x, y, z, EPS_QP):
            return QpSolution(x, QpStatus.OPTIMAL, p.objective(x), p.violation(x),
                              iters, y, z, polished)

    if not np.all(np.isfinite(x)):
        x = np.zeros(n)
    if status == "PrimalInfeasible":
        return QpSolution(x, QpStatus.INFEASIBLE, p.objective(x), p.violation(x), iters, y, z)
    least = minimum_violation(p)
    st = QpStatus.INFEASIBLE if least > INFEASIBLE_VIOLATION else QpStatus.MAX_ITERATIONS
    return QpSolution(x, st, p.objective(x), p.violation(x), iters, y, z)


def minimum_violation(p: QpProblem) -> float:
    """Optimal value of the phase-1 problem: least total constraint violation.

    Variables are ``x`` plus one non-negative excess per equality side and
    per inequality row; the objective is their sum.
    """
    n, me, mi = p.n, p.n_eq, p.n_in
    if me + mi == 0:
        return 0.0
    nv = n + 2 * me + mi
    c = np.concatenate([np.zeros(n), np.ones(2 * me + mi)])
    rows, rhs = [], []
    A_eq = sp.csr_matrix(p.A_eq)
    A_in = sp.csr_matrix(p.A_in)
    if me:
        # A_eq x - b = u - w  as two inequalities
        I = sp.identity(me, format="csr")
        rows.append(sp.hstack([A_eq, -I, I, sp.csr_matrix((me, mi))]))
        rhs.append(p.b_eq)
        rows.append(sp.hstack([-A_eq, I, -I, sp.csr_matrix((me, mi))]))
        rhs.append(-p.b_eq)
    if mi:
        rows.append(sp.hstack([A_in, sp.csr_matrix((mi, 2 * me)), -sp.identity(mi)]))
        rhs.append(p.b_in)
    nonneg = sp.hstack([sp.csr_matrix((nv - n, n)), -sp.identity(nv - n)])
    rows.append(nonneg)
    rhs.append(np.zeros(nv - n))
    A = sp.vstack(rows, format="csc")
    b = np.concatenate(rhs)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = IPM_MAX_ITER
    solver = clarabel.DefaultSolver(sp.csc_matrix((nv, nv)), c, A, b,
                                    [clarabel.NonnegativeConeT(A.shape[0])], settings)
    res = solver.solve()
    if str(res.status) not in ("Solved", "AlmostSolved"):
        return float("inf")
    return max(0.0, float(res.obj_val))

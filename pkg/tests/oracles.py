"""Independent reference computations used by the tests."""
from math import comb

import cvxopt
import numpy as np
from scipy.integrate import simpson

cvxopt.solvers.options.update(show_progress=False, abstol=1e-12, reltol=1e-12, feastol=1e-12,
                              maxiters=200)


def bernstein_sum(cp, T, t):
    """Direct Bernstein-basis evaluation, no recursion."""
    cp = np.asarray(cp, float)
    h = len(cp) - 1
    s = t / T
    return sum(comb(h, k) * s ** k * (1 - s) ** (h - k) * cp[k] for k in range(h + 1))


def hodograph_points(cp, T, order):
    cp = np.asarray(cp, float)
    for _ in range(order):
        h = len(cp) - 1
        if h == 0:
            return np.zeros_like(cp)
        cp = h / T * np.diff(cp, axis=0)
    return cp


def simpson_energy(cp, T, order, n=4001):
    """Integral of the squared k-th derivative norm by Simpson's rule."""
    d = hodograph_points(cp, T, order)
    ts = np.linspace(0.0, T, n)
    vals = np.array([np.sum(bernstein_sum(d, T, t) ** 2) for t in ts])
    return float(simpson(vals, x=ts))


def hull_distance(A, B):
    """Distance between conv(A) and conv(B) from a cvxopt QP over convex weights."""
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    M = np.hstack([A.T, -B.T])
    na, nb = len(A), len(B)
    P = cvxopt.matrix(2 * M.T @ M + 1e-14 * np.eye(na + nb))
    q = cvxopt.matrix(np.zeros(na + nb))
    G = cvxopt.matrix(-np.eye(na + nb))
    h = cvxopt.matrix(np.zeros(na + nb))
    Aeq = np.zeros((2, na + nb))
    Aeq[0, :na] = 1
    Aeq[1, na:] = 1
    sol = cvxopt.solvers.qp(P, q, G, h, cvxopt.matrix(Aeq), cvxopt.matrix(np.ones(2)))
    w = np.maximum(np.array(sol["x"]).ravel(), 0)
    la, mu = w[:na] / w[:na].sum(), w[na:] / w[na:].sum()
    return float(np.linalg.norm(A.T @ la - B.T @ mu))


def projected_gradient_box_qp(Q, q, G, h, iters=200000, tol=1e-12):
    """Solve min 0.5x'Qx + q'x s.t. Gx <= h via projected gradient on the dual.

    The dual of a strictly convex QP has only sign constraints, so its
    projection is a clip.
    """
    Qi = np.linalg.inv(Q)
    H = G @ Qi @ G.T
    c = G @ Qi @ q + h
    step = 1.0 / np.linalg.eigvalsh(H).max()
    z = np.zeros(len(h))
    for _ in range(iters):
        z_new = np.maximum(0.0, z - step * (H @ z + c))
        if np.max(np.abs(z_new - z)) < tol:
            z = z_new
            break
        z = z_new
    return -Qi @ (q + G.T @ z)


def bfs_path_length(blocked, start, goal, cell_size):
    """Axis-move shortest path length on the free cells, breadth first."""
    from collections import deque
    dist = {start: 0}
    dq = deque([start])
    while dq:
        c = dq.popleft()
        if c == goal:
            return dist[c] * cell_size
        for ax in range(len(c)):
            for s in (-1, 1):
                n = list(c)
                n[ax] += s
                n = tuple(n)
                if all(0 <= v < m for v, m in zip(n, blocked.shape)) and not blocked[n] \
                        and n not in dist:
                    dist[n] = dist[c] + 1
                    dq.append(n)
    return None


def boxes_intersect(lo_a, hi_a, lo_b, hi_b, tol=1e-9):
    # open-interval overlap on every axis
    return all(la < hb - tol and lb < ha - tol for la, ha, lb, hb in zip(lo_a, hi_a, lo_b, hi_b))


def recount_collisions(positions, half_extents, occ_lo, occ_hi, tol=1e-9):
    """Brute-force per-sample collision count for box robots."""
    total = 0
    S, n, _ = positions.shape
    for k in range(S):
        for i in range(n):
            lo_i = positions[k, i] - half_extents[i]
            hi_i = positions[k, i] + half_extents[i]
            for j in range(i + 1, n):
                if boxes_intersect(lo_i, hi_i, positions[k, j] - half_extents[j],
                                   positions[k, j] + half_extents[j], tol):
                    total += 1
            for a, b in zip(occ_lo, occ_hi):
                if boxes_intersect(lo_i, hi_i, a, b, tol):
                    total += 1
    return total

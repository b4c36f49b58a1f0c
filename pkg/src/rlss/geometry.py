"""Bézier curves, half-spaces, convex shapes and max-margin separation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import comb

import numpy as np
import scipy.sparse as sp

from . import qp

EPS_FEAS = 1e-7


class SeparationError(RuntimeError):
    """Two point sets could not be strictly separated by a hyperplane."""

    def __init__(self, message, set_a=None, set_b=None, tag=None):
        super().__init__(message)
        self.set_a = set_a
        self.set_b = set_b
        self.tag = tag


def as_points(pts) -> np.ndarray:
    a = np.asarray(pts, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("expected a non-empty list of points")
    if not np.all(np.isfinite(a)):
        raise ValueError("point coordinates must be finite")
    return a


# --------------------------------------------------------------------------
# Bézier curves


class BezierPiece:
    """A Bézier curve of degree ``h`` traversed over ``[0, duration]``."""

    __slots__ = ("control_points", "duration")

    def __init__(self, control_points, duration: float):
        cp = np.asarray(control_points, dtype=float)
        if cp.ndim != 2 or cp.shape[0] == 0:
            raise ValueError("control points must be an (h+1, d) array")
        if not duration > 0:
            raise ValueError(f"duration must be positive, got {duration}")
        self.control_points = cp
        self.duration = float(duration)

    @property
    def degree(self) -> int:
        return self.control_points.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.control_points.shape[1]

    def __repr__(self):
        return f"BezierPiece(degree={self.degree}, duration={self.duration:g})"

    def __call__(self, t):
        return bezier_eval(self, t)

    def derivative(self, order: int = 1) -> "BezierPiece":
        piece = self
        for _ in range(order):
            piece = bezier_derivative(piece)
        return piece


def _de_casteljau(cp: np.ndarray, s: np.ndarray) -> np.ndarray:
    # cp: (h+1, d), s: (m,) -> (m, d)
    b = np.broadcast_to(cp, (s.size,) + cp.shape).copy()
    s = s[:, None, None]
    for r in range(cp.shape[0] - 1, 0, -1):
        b[:, :r] = (1.0 - s) * b[:, :r] + s * b[:, 1:r + 1]
    return b[:, 0]


def bezier_eval(piece: BezierPiece, t):
    """Evaluate ``piece`` at time(s) ``t`` in ``[0, T]`` (De Casteljau).

    A scalar ``t`` returns a ``(d,)`` point, an array returns ``(m, d)``.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    T = piece.duration
    tol = 1e-12 * max(1.0, T)
    if np.any(t < -tol) or np.any(t > T + tol):
        raise ValueError(f"time outside [0, {T:g}]")
    s = np.clip(t / T, 0.0, 1.0)
    out = _de_casteljau(piece.control_points, s)
    # endpoints are returned verbatim
    out[s == 0.0] = piece.control_points[0]
    out[s == 1.0] = piece.control_points[-1]
    return out[0] if scalar else out


def bezier_derivative(piece: BezierPiece) -> BezierPiece:
    """Hodograph: degree ``h-1`` curve with points ``(h/T)(P[k+1] - P[k])``."""
    h = piece.degree
    if h == 0:
        return BezierPiece(np.zeros_like(piece.control_points), piece.duration)
    cp = piece.control_points
    return BezierPiece(h / piece.duration * np.diff(cp, axis=0), piece.duration)


def derivative_matrix(h: int, k: int, T: float) -> np.ndarray:
    """Linear map from the ``h+1`` control points to those of the k-th hodograph."""
    D = np.eye(h + 1)
    for j in range(k):
        m = h - j
        if m == 0:
            return np.zeros((1, h + 1))
        D = (m / T) * (D[1:] - D[:-1])
    return D


class PiecewiseTrajectory:
    """Consecutive Bézier pieces; global time dispatches to the owning piece.

    Times past the end evaluate to the final state (derivatives vanish there);
    negative times are rejected.
    """

    def __init__(self, pieces):
        pieces = list(pieces)
        if not pieces:
            raise ValueError("a trajectory needs at least one piece")
        dims = {p.dim for p in pieces}
        if len(dims) != 1:
            raise ValueError("pieces have mismatched dimensions")
        self.pieces = pieces
        self.durations = np.array([p.duration for p in pieces])
        self.breaks = np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def total_duration(self) -> float:
        return float(self.breaks[-1])

    @property
    def dim(self) -> int:
        return self.pieces[0].dim

    def __len__(self):
        return len(self.pieces)

    def __repr__(self):
        return (f"PiecewiseTrajectory(pieces={len(self.pieces)}, "
                f"duration={self.total_duration:g})")

    def locate(self, t: float):
        """Return ``(piece index, local time)`` for global time ``t``."""
        if t < -1e-12:
            raise ValueError("negative trajectory time")
        if t >= self.total_duration:
            return len(self.pieces) - 1, self.pieces[-1].duration
        j = int(np.searchsorted(self.breaks, t, side="right")) - 1
        j = min(max(j, 0), len(self.pieces) - 1)
        return j, min(max(t - self.breaks[j], 0.0), self.pieces[j].duration)

    def eval(self, t, order: int = 0):
        scalar = np.ndim(t) == 0
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((ts.size, self.dim))
        if np.any(ts < -1e-12):
            raise ValueError("negative trajectory time")
        past = ts >= self.total_duration
        idx = np.clip(np.searchsorted(self.breaks, ts, side="right") - 1,
                      0, len(self.pieces) - 1)
        idx[past] = len(self.pieces) - 1
        for j in np.unique(idx):
            sel = idx == j
            piece = self.pieces[j].derivative(order) if order else self.pieces[j]
            local = np.clip(ts[sel] - self.breaks[j], 0.0, piece.duration)
            out[sel] = bezier_eval(piece, local)
        if order and np.any(past):
            out[past] = 0.0
        return out[0] if scalar else out

    __call__ = eval

    def derivatives_at(self, t: float, max_order: int) -> np.ndarray:
        """Rows 0..max_order hold position, velocity, ... at ``t``."""
        if t >= self.total_duration:
            out = np.zeros((max_order + 1, self.dim))
            out[0] = self.pieces[-1].control_points[-1]
            return out
        j, s = self.locate(t)
        piece = self.pieces[j]
        rows = []
        for _ in range(max_order + 1):
            rows.append(bezier_eval(piece, s))
            piece = bezier_derivative(piece)
        return np.array(rows)

    def end_point(self) -> np.ndarray:
        return self.pieces[-1].control_points[-1].copy()


# --------------------------------------------------------------------------
# Half-spaces and polytopes


@dataclass(frozen=True)
class Hyperplane:
    """Half-space ``{x : n.x + a <= 0}``, stored with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if not norm > 0 or not np.isfinite(norm):
            raise ValueError("hyperplane normal must be non-zero and finite")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def signed_distance(self, x):
        return np.asarray(x, dtype=float) @ self.normal + self.offset

    def contains(self, x, tol: float = EPS_FEAS):
        return self.signed_distance(x) <= tol

    def flipped(self) -> "Hyperplane":
        return Hyperplane(-self.normal, -self.offset)

    def shifted(self, delta: float) -> "Hyperplane":
        """Move the boundary ``delta`` metres into the half-space."""
        return Hyperplane(self.normal, self.offset + delta)


class ConvexPolytope:
    """Intersection of half-spaces, kept as the stacked system ``A x + b <= 0``."""

    def __init__(self, halfspaces=()):
        self.halfspaces = list(halfspaces)

    @classmethod
    def box(cls, lo, hi) -> "ConvexPolytope":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(hi <= lo):
            raise ValueError("box needs lo < hi on every axis")
        hs = []
        for i in range(lo.size):
            e = np.zeros(lo.size)
            e[i] = 1.0
            hs.append(Hyperplane(e, -hi[i]))
            hs.append(Hyperplane(-e, lo[i]))
        return cls(hs)

    def __len__(self):
        return len(self.halfspaces)

    def __repr__(self):
        return f"ConvexPolytope({len(self.halfspaces)} half-spaces)"

    @property
    def A(self) -> np.ndarray:
        if not self.halfspaces:
            return np.zeros((0, 0))
        return np.array([h.normal for h in self.halfspaces])

    @property
    def b(self) -> np.ndarray:
        return np.array([h.offset for h in self.halfspaces])

    def residuals(self, x) -> np.ndarray:
        if not self.halfspaces:
            return np.zeros(np.shape(np.atleast_2d(x))[0] if np.ndim(x) > 1 else 0)
        return np.asarray(x, dtype=float) @ self.A.T + self.b

    def intersect(self, other: "ConvexPolytope") -> "ConvexPolytope":
        return ConvexPolytope(self.halfspaces + other.halfspaces)


def polytope_contains(poly: ConvexPolytope, x, tol: float = EPS_FEAS) -> bool:
    """True iff ``n.x + a <= tol`` for every half-space of ``poly``."""
    x = np.asarray(x, dtype=float)
    return all(h.signed_distance(x) <= tol for h in poly.halfspaces)


# --------------------------------------------------------------------------
# Convex shapes


class ConvexShape:
    """Convex polytope in vertex form, positioned by a reference point.

    ``vertices`` are offsets from the reference point, so the shape placed
    at ``p`` is ``vertices + p``.
    """

    def __init__(self, vertices):
        self.vertices = as_points(vertices)
        self.vertices.setflags(write=False)

    @classmethod
    def box(cls, half_extents) -> "ConvexShape":
        he = np.asarray(half_extents, dtype=float)
        if np.any(he < 0):
            raise ValueError("half extents must be non-negative")
        d = he.size
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
        shape = cls(np.unique(corners * he, axis=0))
        shape.__dict__["box_half_extents"] = he
        return shape

    @classmethod
    def point(cls, dim: int) -> "ConvexShape":
        return cls.box(np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def __repr__(self):
        if self.box_half_extents is not None:
            return f"ConvexShape.box({self.box_half_extents.tolist()})"
        return f"ConvexShape({len(self.vertices)} vertices)"

    @cached_property
    def box_half_extents(self):
        """Half extents when the shape is an origin-centred axis-aligned box."""
        lo, hi = self.vertices.min(0), self.vertices.max(0)
        if not np.allclose(lo, -hi, atol=1e-12):
            return None
        he = hi
        d = self.dim
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
        corners = np.unique(corners * he, axis=0)
        verts = np.unique(self.vertices, axis=0)
        # every vertex must be a corner; every corner must be present
        for v in verts:
            if not np.any(np.all(np.abs(corners - v) < 1e-12, axis=1)):
                return None
        for c in corners:
            if not np.any(np.all(np.abs(verts - c) < 1e-12, axis=1)):
                return None
        return he

    @property
    def is_box(self) -> bool:
        return self.box_half_extents is not None

    def at(self, p) -> np.ndarray:
        return self.vertices + np.asarray(p, dtype=float)

    def aabb(self, p=None):
        lo, hi = self.vertices.min(0), self.vertices.max(0)
        if p is not None:
            p = np.asarray(p, dtype=float)
            return lo + p, hi + p
        return lo, hi

    def support(self, direction) -> float:
        return float(np.max(self.vertices @ np.asarray(direction, dtype=float)))

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None] - v[None], axis=-1)))


def buffer_hyperplane(h: Hyperplane, shape: ConvexShape) -> Hyperplane:
    """Tighten ``h`` so that a reference point inside it keeps the whole shape inside.

    The boundary moves inward by the shape's support in the normal direction.
    """
    return h.shifted(shape.support(h.normal))


def buffer_polytope(poly: ConvexPolytope, shape: ConvexShape) -> ConvexPolytope:
    return ConvexPolytope([buffer_hyperplane(h, shape) for h in poly.halfspaces])


def segment_swept_hull(seg_start, seg_end, shape: ConvexShape) -> np.ndarray:
    """Vertices whose convex hull is the region swept by translating ``shape``."""
    a = shape.at(seg_start)
    if np.array_equal(np.asarray(seg_start, float), np.asarray(seg_end, float)):
        return a
    return np.vstack([a, shape.at(seg_end)])


def in_convex_hull(points, x, tol: float = EPS_FEAS) -> bool:
    """Membership of ``x`` in the convex hull of ``points`` (small LP)."""
    from scipy.optimize import linprog

    P = as_points(points)
    x = np.asarray(x, dtype=float)
    m = P.shape[0]
    # minimise total |P'w - x| over the simplex
    d = P.shape[1]
    c = np.concatenate([np.zeros(m), np.ones(2 * d)])
    A_eq = np.hstack([P.T, -np.eye(d), np.eye(d)])
    A_eq = np.vstack([A_eq, np.concatenate([np.ones(m), np.zeros(2 * d)])])
    b_eq = np.concatenate([x, [1.0]])
    res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return bool(res.status == 0 and res.fun <= tol)


# --------------------------------------------------------------------------
# Max-margin separation


def _svm_block(A: np.ndarray, B: np.ndarray):
    """Constraint rows of the hard-margin problem over ``(n, a)``."""
    d = A.shape[1]
    G = np.vstack([np.hstack([A, np.ones((len(A), 1))]),
                   -np.hstack([B, np.ones((len(B), 1))])])
    h = -np.ones(len(A) + len(B))
    Q = np.diag(np.concatenate([np.ones(d), [0.0]]))
    return Q, G, h


def _normalise(A, B):
    # Centre and scale so the QP is well conditioned regardless of units.
    c = 0.5 * (A.mean(0) + B.mean(0))
    s = max(float(np.max(np.abs(np.vstack([A, B]) - c))), 1e-12)
    return (A - c) / s, (B - c) / s, c, s


def _plane_from(w, c, s):
    n, a = w[:-1], w[-1]
    # undo the affine normalisation: n.(x - c)/s + a = 0
    return Hyperplane(n / s, a - n @ c / s)


def svm_separate(set_a, set_b) -> Hyperplane:
    """Hard-margin SVM between two finite point sets.

    Solves ``min |n|^2`` subject to ``n.x + a <= -1`` on ``set_a`` and
    ``n.x + a >= 1`` on ``set_b``. The returned half-space contains
    ``set_a``; its boundary is the margin midline and its normal is unit
    length, so ``-signed_distance`` of the nearest point equals the margin.

    Raises
    ------
    SeparationError
        When the sets are not strictly linearly separable.
    """
    A, B = as_points(set_a), as_points(set_b)
    if A.shape[1] != B.shape[1]:
        raise ValueError("point sets have different dimensions")
    An, Bn, c, s = _normalise(A, B)
    Q, G, h = _svm_block(An, Bn)
    sol = qp.solve(qp.QpProblem(Q, np.zeros(Q.shape[0]), A_in=G, b_in=h), check_psd=False)
    if not sol.ok:
        raise SeparationError(f"point sets are not separable ({sol.status.value})", A, B)
    return _plane_from(sol.x, c, s)


def svm_separate_many(pairs, tags=None) -> list[Hyperplane]:
    """Solve several independent SVM problems as one block-diagonal QP.

    On failure each pair is re-solved alone so the error names the culprit
    through ``SeparationError.tag``.
    """
    pairs = [(as_points(a), as_points(b)) for a, b in pairs]
    if tags is None:
        tags = list(range(len(pairs)))
    if not pairs:
        return []
    if len(pairs) == 1:
        try:
            return [svm_separate(*pairs[0])]
        except SeparationError as e:
            e.tag = tags[0]
            raise
    norms, Qs, Gs, hs = [], [], [], []
    for A, B in pairs:
        An, Bn, c, s = _normalise(A, B)
        Q, G, h = _svm_block(An, Bn)
        norms.append((c, s))
        Qs.append(Q)
        Gs.append(G)
        hs.append(h)
    Q = sp.block_diag(Qs, format="csc")
    G = sp.block_diag(Gs, format="csr")
    p = qp.QpProblem(Q, np.zeros(Q.shape[0]), A_in=G, b_in=np.concatenate(hs))
    sol = qp.solve(p, check_psd=False)
    if not sol.ok:
        for (A, B), tag in zip(pairs, tags):
            try:
                svm_separate(A, B)
            except SeparationError as e:
                e.tag = tag
                raise
        # every pair separates alone; fall back to individual solutions
        return [svm_separate(A, B) for A, B in pairs]
    out, k = [], 0
    for (A, _), (c, s) in zip(pairs, norms):
        d1 = A.shape[1] + 1
        out.append(_plane_from(sol.x[k:k + d1], c, s))
        k += d1
    return out


def box_separate(lo_a, hi_a, lo_b, hi_b) -> Hyperplane:
    """Closed-form max-margin plane between two disjoint axis-aligned boxes.

    The SVM optimum is the perpendicular bisector of the closest pair of
    points, which for boxes decouples per axis.
    """
    lo_a, hi_a = np.asarray(lo_a, float), np.asarray(hi_a, float)
    lo_b, hi_b = np.asarray(lo_b, float), np.asarray(hi_b, float)
    gap_pos = lo_b - hi_a  # b above a
    gap_neg = lo_a - hi_b  # b below a
    w = np.where(gap_pos > 0, gap_pos, np.where(gap_neg > 0, -gap_neg, 0.0))
    if not np.any(w > 0) and not np.any(w < 0):
        raise SeparationError("boxes overlap or touch")
    # closest points: clamp on separated axes, overlap interval midpoint elsewhere
    lo_o = np.maximum(lo_a, lo_b)
    hi_o = np.minimum(hi_a, hi_b)
    mid_overlap = 0.5 * (lo_o + hi_o)
    pa = np.where(w > 0, hi_a, np.where(w < 0, lo_a, mid_overlap))
    pb = np.where(w > 0, lo_b, np.where(w < 0, hi_b, mid_overlap))
    m = 0.5 * (pa + pb)
    return Hyperplane(w, -w @ m)


def swept_box_separate(a, b, shape_lo, shape_hi, lo, hi) -> list[Hyperplane]:
    """Max-margin planes between a box swept along ``a -> b`` and each box ``[lo_i, hi_i]``.

    The swept hull is the segment plus the robot box, so its distance to an
    obstacle box equals the distance from the segment to the obstacle grown
    by the reflected robot box. That distance is a convex piecewise
    quadratic in the segment parameter whose derivative is piecewise linear,
    so the minimiser follows exactly from the breakpoints. The plane normal
    is the closest-point direction and the boundary sits halfway between
    the two support values, which is the hard-margin SVM solution.
    Each returned half-space contains the swept hull.

    Raises
    ------
    SeparationError
        With ``tag`` set to the index of the first box the sweep touches.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    slo = np.asarray(shape_lo, dtype=float)
    shi = np.asarray(shape_hi, dtype=float)
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    if not len(lo):
        return []
    glo, ghi = lo - shi, hi - slo
    D = b - a
    moving = np.abs(D) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = np.where(np.tile(moving, 2), (np.concatenate([glo, ghi], axis=1) - np.tile(a, 2))
                      / np.tile(np.where(moving, D, 1.0), 2), 0.0)
    M = len(lo)
    cand = np.sort(np.concatenate([np.zeros((M, 1)), np.ones((M, 1)), np.clip(tb, 0.0, 1.0)],
                                  axis=1), axis=1)

    def slope(t):
        x = a + t[..., None] * D
        r = np.where(x < glo[:, None], x - glo[:, None],
                     np.where(x > ghi[:, None], x - ghi[:, None], 0.0))
        return 2.0 * np.sum(r * D, axis=-1)

    fp = slope(cand)
    k = np.argmax(fp >= 0, axis=1)
    t = np.where(fp[:, -1] <= 0, 1.0, 0.0)
    inner = (fp[:, 0] < 0) & (fp[:, -1] > 0)
    if np.any(inner):
        idx = np.flatnonzero(inner)
        k1 = k[idx]
        c0, c1 = cand[idx, k1 - 1], cand[idx, k1]
        f0, f1 = fp[idx, k1 - 1], fp[idx, k1]
        span = np.where(f1 - f0 > 0, f1 - f0, 1.0)
        t[idx] = np.where(f1 - f0 > 0, c0 - f0 * (c1 - c0) / span, c0)
    s_pt = a + t[:, None] * D
    w = np.clip(s_pt, glo, ghi) - s_pt
    dist = np.linalg.norm(w, axis=1)
    bad = np.flatnonzero(dist <= 1e-12)
    if bad.size:
        raise SeparationError(f"swept box touches box {int(bad[0])}", tag=int(bad[0]))
    n = w / dist[:, None]
    h_max = np.maximum(n @ a, n @ b) + np.sum(np.maximum(n * slo, n * shi), axis=1)
    o_min = np.sum(np.minimum(n * lo, n * hi), axis=1)
    c = 0.5 * (h_max + o_min)
    return [Hyperplane(ni, -ci) for ni, ci in zip(n, c)]


def margin(h: Hyperplane, set_a, set_b) -> float:
    """Smallest distance from the boundary to either set (negative if misclassified)."""
    da = -h.signed_distance(as_points(set_a))
    db = h.signed_distance(as_points(set_b))
    return float(min(da.min(), db.min()))


def boxes_overlap(lo_a, hi_a, lo_b, hi_b, tol: float = 1e-9):
    """Whether axis-aligned boxes penetrate: on every axis each starts before the other ends.

    Touching faces do not count; a degenerate box (such as a point) strictly
    inside another does. Broadcasts over leading axes.
    """
    lo_a, hi_a, lo_b, hi_b = (np.asarray(v, dtype=float) for v in (lo_a, hi_a, lo_b, hi_b))
    ov = np.all((lo_a < hi_b - tol) & (lo_b < hi_a - tol), axis=-1)
    return bool(ov) if np.ndim(ov) == 0 else ov


def convex_sets_intersect(verts_a, verts_b, tol: float = 1e-9) -> bool:
    """Whether the convex hulls of two vertex sets intersect.

    Bounding boxes that do not penetrate (``boxes_overlap``) are rejected up
    front. Otherwise the LP ``max t`` s.t. ``n.x + c <= -t`` on one set,
    ``n.y + c >= t`` on the other, ``|n|_inf <= 1`` decides: the hulls
    intersect iff ``t <= tol``, so contact that is not face to face with
    the bounding boxes counts as intersection.
    """
    from scipy.optimize import linprog

    A, B = as_points(verts_a), as_points(verts_b)
    la, ha = A.min(0), A.max(0)
    lb, hb = B.min(0), B.max(0)
    if not boxes_overlap(la, ha, lb, hb, tol):
        return False
    d = A.shape[1]
    # variables: n (d), c, t ; maximise t
    cost = np.zeros(d + 2)
    cost[-1] = -1.0
    rows = np.vstack([np.hstack([A, np.ones((len(A), 1)), np.ones((len(A), 1))]),
                      np.hstack([-B, -np.ones((len(B), 1)), np.ones((len(B), 1))])])
    rhs = np.zeros(len(A) + len(B))
    bounds = [(-1, 1)] * d + [(None, None), (None, 1.0)]
    res = linprog(cost, A_ub=rows, b_ub=rhs, bounds=bounds, method="highs")
    if res.status != 0:
        return True
    # t is the separation measured in the inf-norm-bounded normal's units
    return -res.fun <= tol

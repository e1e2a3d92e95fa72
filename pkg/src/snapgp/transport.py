"""Entropic OT for training (debiased Sinkhorn divergence) and exact W2 for evaluation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from ._netsimplex import network_simplex

DEFAULT_BLUR = 0.05
DEFAULT_SCALING = 0.5
EXACT_MAX_ENTRIES = 4_000_000


@dataclass
class PointCloud:
    """n points (array or Var of shape (n, d)) with positive weights summing to 1."""

    points: object
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = dc.value(self.points)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"points must be an (n, d) array with n >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        n = pts.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
            return
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w <= 0):
            raise ValueError("weights must be positive with one entry per point")
        dev = abs(float(w.sum()) - 1.0)
        if dev > 1e-6:
            raise ValueError(f"weights sum to {w.sum():.9g}, not 1")
        if dev > 1e-12:
            warnings.warn(f"renormalizing weights (sum deviates from 1 by {dev:.2g})", stacklevel=2)
            w = w / w.sum()
        self.weights = w

    @property
    def n(self) -> int:
        return dc.value(self.points).shape[0]

    @property
    def dim(self) -> int:
        return dc.value(self.points).shape[1]

    @classmethod
    def uniform(cls, points) -> "PointCloud":
        return cls(points)


@dataclass
class TransportResult:
    cost: float
    f: np.ndarray
    g: np.ndarray
    iterations: int
    converged: bool
    loss: object = None  # the divergence as a Var when points live on a tape, else float
    extras: dict = field(default_factory=dict)


def _sqdist(x, y):
    xx = dc.sum(dc.mul(x, x), axis=1, keepdims=True)
    yy = dc.reshape(dc.sum(dc.mul(y, y), axis=1), (1, -1))
    return dc.sub(dc.add(xx, yy), dc.mul(dc.matmul(x, dc.transpose(y)), 2.0))


def cost_matrix(a: PointCloud, b: PointCloud, p: int = 2):
    """||a_i - b_j||^p; differentiable when either cloud lives on a tape."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if p not in (1, 2):
        raise ValueError(f"unsupported exponent p={p}")
    d2 = dc.relu(_sqdist(a.points, b.points))
    return d2 if p == 2 else dc.sqrt(d2)


def _softmin(eps, C, h):
    """-eps * log sum_j exp(h_j - C_ij / eps)."""
    return dc.mul(dc.logsumexp(dc.sub(h, dc.mul(C, 1.0 / eps)), axis=1), -eps)


def _softmin_scaled(eps, C_over_eps, h):
    """Off-tape softmin taking the pre-scaled cost C / eps."""
    Z = h - C_over_eps
    mx = Z.max(axis=1)
    Z -= mx[:, None]
    np.maximum(Z, dc.EXP_FLOOR, out=Z)
    np.exp(Z, out=Z)
    return -eps * (mx + np.log(Z.sum(axis=1)))


def epsilon_schedule(diameter: float, blur: float, scaling: float, p: int = 2) -> list[float]:
    """diameter^p, then geometric decay by scaling^p down to blur^p."""
    if not blur > 0:
        raise ValueError("blur must be positive")
    if not 0 < scaling < 1:
        raise ValueError("scaling must lie in (0, 1)")
    diameter = max(diameter, blur)
    steps = np.arange(p * math.log(diameter), p * math.log(blur), p * math.log(scaling))
    return [diameter**p] + [float(math.exp(e)) for e in steps] + [blur**p]


def _lex_less(x: np.ndarray, y: np.ndarray) -> bool:
    """Numeric lexicographic x < y for equal-shape arrays."""
    diff = np.flatnonzero(x.ravel() != y.ravel())
    return bool(diff.size) and bool(x.ravel()[diff[0]] < y.ravel()[diff[0]])


def _canonical_order(a: PointCloud, b: PointCloud) -> bool:
    """True when (a, b) should be swapped so both argument orders run identical arithmetic.

    The comparison is numeric (not bytewise), so a tiny perturbation of the
    points only flips the order when the leading entries are nearly tied.
    """
    if a.n != b.n:
        return b.n < a.n
    pa, pb = np.asarray(dc.value(a.points)), np.asarray(dc.value(b.points))
    if not np.array_equal(pa, pb):
        return _lex_less(pb, pa)
    return _lex_less(b.weights, a.weights)


@dataclass
class _DualSolve:
    g: object  # potential on the second marginal (array or Var)
    iterations: int
    converged: bool
    last_change: float


def _solve_dual(C, la, lb, eps_list, symmetric: bool, tol: float, max_iter: int,
                iters_per_level: int | None, record: bool) -> _DualSolve:
    """Anneal eps through ``eps_list`` and return the potential on ``lb``.

    Cross problems use alternating f/g updates; symmetric (self) problems
    carry one potential with averaged updates. ``record`` keeps every
    iteration on the tape.
    """
    level_cap = max(1, max_iter // (2 * len(eps_list)))
    n_a, n_b = dc.value(C).shape
    g = np.zeros(n_b)
    iters, converged, change = 0, False, np.inf
    CT = None if symmetric else dc.transpose(C)
    for level, eps in enumerate(eps_list):
        final = level == len(eps_list) - 1
        if record:
            def update(g, eps=eps):
                if symmetric:
                    return dc.mul(dc.add(g, _softmin(eps, C, dc.add(lb, dc.mul(g, 1.0 / eps)))), 0.5)
                f = _softmin(eps, C, dc.add(lb, dc.mul(g, 1.0 / eps)))
                return _softmin(eps, CT, dc.add(la, dc.mul(f, 1.0 / eps)))
        else:
            Cs = C * (1.0 / eps)
            CsT = None if symmetric else np.ascontiguousarray(Cs.T)

            def update(g, eps=eps, Cs=Cs, CsT=CsT):
                if symmetric:
                    return 0.5 * (g + _softmin_scaled(eps, Cs, lb + g / eps))
                f = _softmin_scaled(eps, Cs, lb + g / eps)
                return _softmin_scaled(eps, CsT, la + f / eps)
        done = 0
        while True:
            new = update(g)
            iters += 1
            done += 1
            if iters_per_level is not None:
                g = new
                if done >= iters_per_level:
                    converged = final
                    break
                continue
            change = float(np.max(np.abs(dc.value(new) - dc.value(g))))
            g = new
            if change < tol:
                converged = final
                break
            if (not final and done >= level_cap) or (final and iters >= max_iter):
                break
    return _DualSolve(g, iters, converged, change)


def sinkhorn_divergence(a: PointCloud, b: PointCloud, blur: float = DEFAULT_BLUR,
                        scaling: float = DEFAULT_SCALING, p: int = 2, tol: float = 1e-6,
                        max_iter: int = 500, unroll: bool = False,
                        iters_per_level: int | None = None) -> TransportResult:
    """Debiased S(a, b) = OT(a, b) - OT(a, a)/2 - OT(b, b)/2, log-domain Sinkhorn.

    Each of the three OT problems anneals eps from the squared diameter down
    to blur^p. Every level is iterated until the dual potential moves less
    than ``tol`` in sup-norm; intermediate levels get at most
    ``max_iter // (2 * levels)`` iterations and the final level runs until
    ``tol`` is met or ``max_iter`` iterations have been spent in total.
    Passing ``iters_per_level`` replaces the tolerance tests by a fixed count
    per level, which makes the computed value a smooth function of the points.

    Each OT term is the semi-dual value <alpha, softmin(g)> + <beta, g> at the
    final potential. By default the iterations run off-tape and only that
    last evaluation is recorded, so gradients reach the point coordinates
    through the cost matrices with the potentials held fixed (exact at
    convergence). With ``unroll=True`` every iteration is recorded and the
    gradient is exact for the computed value.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    swapped = _canonical_order(a, b)
    if swapped:
        a, b = b, a

    def costs(x_pts, y_pts):
        xa, xb = PointCloud(x_pts, a.weights), PointCloud(y_pts, b.weights)
        return cost_matrix(xa, xb, p), cost_matrix(xa, xa, p), cost_matrix(xb, xb, p)

    x = a.points if unroll else dc.value(a.points)
    y = b.points if unroll else dc.value(b.points)
    C_xy, C_xx, C_yy = costs(x, y)
    la, lb = np.log(a.weights), np.log(b.weights)
    diam2 = max(float(np.max(dc.value(C_xy))), float(np.max(dc.value(C_xx))), float(np.max(dc.value(C_yy))))
    if not math.isfinite(diam2):
        raise dc.NonFiniteError("cost matrix overflowed; point coordinates are too large")
    diameter = diam2 ** (1.0 / p) if diam2 > 0 else blur
    eps_list = epsilon_schedule(diameter, blur, scaling, p)

    opts = dict(tol=tol, max_iter=max_iter, iters_per_level=iters_per_level, record=unroll)
    ab = _solve_dual(C_xy, la, lb, eps_list, symmetric=False, **opts)
    aa = _solve_dual(C_xx, la, la, eps_list, symmetric=True, **opts)
    bb = _solve_dual(C_yy, lb, lb, eps_list, symmetric=True, **opts)

    if not unroll and (isinstance(a.points, dc.Var) or isinstance(b.points, dc.Var)):
        # record only the final semi-dual evaluation
        C_xy, C_xx, C_yy = costs(a.points, b.points)
    eps = eps_list[-1]

    def semi_dual(C, lb_, w_a, w_b, g):
        f = _softmin(eps, C, dc.add(lb_, dc.mul(g, 1.0 / eps)))
        return dc.add(dc.sum(dc.mul(f, w_a)), dc.sum(dc.mul(g, w_b)))

    ot_ab = semi_dual(C_xy, lb, a.weights, b.weights, ab.g)
    ot_aa = semi_dual(C_xx, la, a.weights, a.weights, aa.g)
    ot_bb = semi_dual(C_yy, lb, b.weights, b.weights, bb.g)
    loss = dc.sub(ot_ab, dc.mul(dc.add(ot_aa, ot_bb), 0.5))
    f_ab = _softmin(eps, dc.value(C_xy), lb + dc.value(ab.g) / eps)
    g_ab = np.array(dc.value(ab.g))
    f_ab = np.array(f_ab)
    if swapped:
        f_ab, g_ab = g_ab, f_ab
    solves = (ab, aa, bb)
    return TransportResult(
        cost=float(dc.value(loss)), f=f_ab, g=g_ab,
        iterations=max(s.iterations for s in solves), converged=all(s.converged for s in solves),
        loss=loss,
        extras={"eps_schedule": eps_list, "last_change": max(s.last_change for s in solves),
                "iterations_per_problem": tuple(s.iterations for s in solves)},
    )


def sum_transport_cost(observed: dict, generated: dict, blur: float = DEFAULT_BLUR,
                       scaling: float = DEFAULT_SCALING, **kw):
    """Sum over shared time keys (ascending order) of the Sinkhorn divergence."""
    missing_gen = sorted(set(observed) - set(generated))
    missing_obs = sorted(set(generated) - set(observed))
    if missing_gen or missing_obs:
        raise KeyError(f"time keys differ: missing in generated {missing_gen}, "
                       f"missing in observed {missing_obs}")
    total = 0.0
    per_time = {}
    for t in sorted(observed):
        r = sinkhorn_divergence(observed[t], generated[t], blur=blur, scaling=scaling, **kw)
        per_time[t] = r
        total = dc.add(total, r.loss)
    return total, per_time


def exact_w2(a: PointCloud, b: PointCloud, max_entries: int = EXACT_MAX_ENTRIES,
             max_pivots: int | None = None) -> float:
    """Exact squared-Euclidean OT cost (W2^2) via the network simplex."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.n * b.n > max_entries:
        raise ValueError(f"instance has {a.n * b.n} cost entries, cap is {max_entries}")
    wa, wb = np.asarray(a.weights, dtype=np.float64), np.asarray(b.weights, dtype=np.float64)
    if abs(wa.sum() - wb.sum()) > 1e-9:
        raise ValueError(f"total masses differ: {wa.sum():.12g} vs {wb.sum():.12g}")
    C = np.ascontiguousarray(dc.value(cost_matrix(
        PointCloud(dc.value(a.points), wa), PointCloud(dc.value(b.points), wb), 2)))
    if max_pivots is None:
        max_pivots = 200 * (a.n + b.n) * max(10, int(np.log2(a.n * b.n + 1)))
    cost, status, pivots, _, pred, flow = network_simplex(wa, wb, C, max_pivots)
    if status != 0:
        raise RuntimeError(f"network simplex hit the pivot limit ({max_pivots})")
    E = a.n * b.n
    art = float(flow[(pred >= E) & (flow > 0)].sum())
    if art > 1e-9:
        raise RuntimeError(f"infeasible transport solution (artificial flow {art:.3g})")
    return float(cost)


def w2_distance(a: PointCloud, b: PointCloud, **kw) -> float:
    return math.sqrt(max(exact_w2(a, b, **kw), 0.0))

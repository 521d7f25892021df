"""Exact 1D projection onto ``{ρ <= c}`` for a constant cap.

The projection keeps ``g`` where it is below the cap and replaces every overfull
region by a saturated interval at height ``c``.

Two discretisations are offered:

``continuum``
    ``g`` is the piecewise-constant function on the cells. Each saturated
    interval carries the mass of ``g`` over it and has the same centre of
    mass; colliding intervals are merged and solved again. The endpoints are
    exact real numbers and the result is rasterised by cell overlap.
``atomic``
    Cell masses are point masses at cell centres and every cell can hold
    ``c * h``, which is the discrete problem solved by :func:`project_lp`.
    In cumulative-mass variables the cost is separable, convex and piecewise
    linear, and is minimised exactly by dynamic programming. Ties are broken
    towards the smallest first moment, as in :func:`project_lp`.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from ..errors import Infeasible
from ..grid import ConstraintField, GridDensity, mass
from ..ot1d import QuantileTable, potentials_1d
from .result import ProjectionResult, finish, identity_result

_OVER_RTOL = 1e-13


def _overfull_runs(over: np.ndarray) -> list:
    """Maximal runs of ``True`` as inclusive ``[start, stop]`` index pairs."""
    padded = np.concatenate([[False], over, [False]]).astype(np.int8)
    d = np.diff(padded)
    return [[int(s), int(e) - 1] for s, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1))]


# continuum model ----------------------------------------------------------


class _Excess:
    """``E(x) = ∫ (g - c)`` from the left box edge, and its antiderivative."""

    def __init__(self, g: np.ndarray, edges: np.ndarray, cap: float):
        self.edges = edges
        self.rate = g - cap
        h = np.diff(edges)
        self.knots = np.concatenate([[0.0], np.cumsum(self.rate * h)])
        self.area = np.concatenate([[0.0], np.cumsum(0.5 * (self.knots[1:] + self.knots[:-1]) * h)])

    def __call__(self, x):
        return np.interp(x, self.edges, self.knots)

    def integral(self, x):
        i = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, len(self.rate) - 1)
        t = x - self.edges[i]
        return self.area[i] + self.knots[i] * t + 0.5 * self.rate[i] * t * t

    def level_left(self, lam, lo, hi):
        """Point of ``[lo, hi]`` where the nonincreasing ``E`` crosses ``lam``."""
        if self(lo) <= lam:
            return lo
        if self(hi) >= lam:
            return hi
        return brentq(lambda x: self(x) - lam, lo, hi, xtol=1e-15, rtol=1e-15)

    level_right = level_left


def continuum_intervals(g: np.ndarray, edges: np.ndarray, cap: float) -> list:
    """Saturated intervals ``(a, b)`` of the continuum projection.

    For a level ``λ`` the candidate interval runs between the crossings of
    ``E = λ`` on either side of an overfull run, which balances the mass. The
    centre-of-mass condition is ``∫_a^b (E - λ) dx = 0``; its left side is
    decreasing in ``λ`` and is solved by Brent's method.
    """
    ex = _Excess(g, edges, cap)
    groups = [[edges[s], edges[e + 1]] for s, e in _overfull_runs(g > cap * (1 + _OVER_RTOL))]
    while True:
        sol = []
        for k, (left, right) in enumerate(groups):
            lo = groups[k - 1][1] if k > 0 else edges[0]
            hi = groups[k + 1][0] if k + 1 < len(groups) else edges[-1]

            def ends(lam):
                return ex.level_left(lam, lo, left), ex.level_right(lam, right, hi)

            def moment(lam):
                a, b = ends(lam)
                return float(ex.integral(b) - ex.integral(a) - lam * (b - a))

            lam_lo = max(ex(left), ex(hi))
            lam_hi = min(ex(lo), ex(right))
            f_lo, f_hi = moment(lam_lo), moment(lam_hi)
            if lam_hi > lam_lo and f_lo * f_hi <= 0:
                lam = brentq(moment, lam_lo, lam_hi, xtol=1e-16, rtol=1e-15)
            else:
                # the interval is pinned against a neighbour or the box
                lam = lam_lo if f_lo < 0 else lam_hi
            sol.append(ends(lam))
        for k in range(len(sol) - 1):
            if sol[k][1] >= sol[k + 1][0] - 1e-14 * (edges[-1] - edges[0]):
                groups[k] = [groups[k][0], groups[k + 1][1]]
                del groups[k + 1]
                break
        else:
            return [(float(a), float(b)) for a, b in sol]


def _rasterize(g: np.ndarray, edges: np.ndarray, cap: float, intervals) -> np.ndarray:
    h = np.diff(edges)
    out = g.astype(float).copy()
    for a, b in intervals:
        frac = (np.clip(edges[1:], a, b) - np.clip(edges[:-1], a, b)) / h
        out = out * (1 - frac) + cap * frac
    return out


def continuum_table(g: GridDensity, cap: float, intervals) -> QuantileTable:
    """Exact quantile table of the continuum projection, before rasterisation."""
    edges = g.grid.edges()
    cuts = [x for ab in intervals for x in ab if edges[0] < x < edges[-1]]
    pts = np.union1d(edges, cuts)
    mid = 0.5 * (pts[:-1] + pts[1:])
    cell = np.clip(np.searchsorted(edges, mid) - 1, 0, g.grid.size - 1)
    dens = g.values[cell].astype(float)
    for a, b in intervals:
        dens[(mid > a) & (mid < b)] = cap
    m = dens * np.diff(pts)
    keep = m > 0
    knots = np.concatenate([[0.0], np.cumsum(m[keep])])
    return QuantileTable(knots, pts[:-1][keep], pts[1:][keep])


# atomic model -------------------------------------------------------------


class _ConvexPL:
    """Convex piecewise-linear function on ``[lo, hi]``.

    Slopes are pairs ``(a, b)`` ordered lexicographically: ``a`` is the cost
    slope and ``b`` the slope of the tie-breaking term. Both stay exact
    (half-integers and integers), so ties are resolved without tolerances.
    """

    def __init__(self, lo, hi, xs, sa, sb):
        self.lo, self.hi = float(lo), float(hi)
        self.xs, self.sa, self.sb = xs, sa, sb

    def first_nonneg(self) -> int:
        neg = (self.sa < 0) | ((self.sa == 0) & (self.sb < 0))
        return int(np.argmin(neg)) if not neg.all() else len(neg)

    def argmin(self) -> float:
        p = self.first_nonneg()
        if p == 0:
            return self.lo
        return self.hi if p == len(self.sa) else float(self.xs[p - 1])

    def window_min(self, width: float) -> "_ConvexPL":
        """``r -> min V`` over ``[r - width, r]``: split at the minimiser and shift the rising part."""
        p = self.first_nonneg()
        m = self.argmin()
        if p == len(self.sa):
            xs = np.concatenate([self.xs, [m]])
        else:
            xs = np.concatenate([self.xs[:p], [m + width], self.xs[p:] + width])
        sa = np.concatenate([self.sa[:p], [0.0], self.sa[p:]])
        sb = np.concatenate([self.sb[:p], [0], self.sb[p:]])
        return _ConvexPL(self.lo, self.hi + width, xs, sa, sb)

    def clip(self, lo: float, hi: float) -> "_ConvexPL":
        lo, hi = max(lo, self.lo), min(hi, self.hi)
        if lo > hi:
            raise Infeasible("box cannot hold the mass under the cap")
        keep = (self.xs > lo) & (self.xs < hi)
        first = int(np.searchsorted(self.xs, lo, side="right"))
        idx = np.flatnonzero(keep)
        pieces = np.concatenate([[first], idx + 1]) if idx.size else np.array([first])
        return _ConvexPL(lo, hi, self.xs[keep], self.sa[pieces], self.sb[pieces])

    def add(self, bx: np.ndarray, ba: np.ndarray, bb: int) -> "_ConvexPL":
        """Add a function with breakpoints ``bx``, slopes ``ba`` and constant ``bb`` tie slope."""
        inner = bx[(bx > self.lo) & (bx < self.hi)]
        xs = np.union1d(self.xs, inner)
        edges = np.concatenate([[self.lo], xs, [self.hi]])
        mid = 0.5 * (edges[:-1] + edges[1:])
        mine = np.searchsorted(self.xs, mid)
        other = np.searchsorted(bx, mid)
        sa = self.sa[mine] + ba[other]
        sb = self.sb[mine] + bb
        # drop breakpoints between equal slopes
        same = (sa[1:] == sa[:-1]) & (sb[1:] == sb[:-1])
        keep = np.concatenate([[True], ~same])
        return _ConvexPL(self.lo, self.hi, xs[~same], sa[keep], sb[keep])


def atomic_projection(g: np.ndarray, h: float, cap: float) -> np.ndarray:
    """Projection of the cell-centre point masses of ``g`` onto ``{ρ <= cap}``.

    With ``R_i`` the projected mass in cells ``0..i`` and ``Y`` the quantile
    (cell index) of ``g``, the transport cost is
    ``h² Σ_i [J(R_i) - (i + ½) R_i] + const`` with ``J(r) = ∫_0^r Y``. Each
    term is convex and piecewise linear and the constraints are
    ``0 <= R_i - R_{i-1} <= c h``, so a forward pass of exact min-convolutions
    and a backward clipping pass solve the problem. The tie-break
    ``-Σ R_i`` picks the optimum with the smallest first moment.

    Returns the projected cell masses.
    """
    d = np.asarray(g, dtype=float) * h
    n = d.size
    kap = cap * h
    total = float(d.sum())
    cum = np.cumsum(d)[:-1]
    # J has slope k on (G_{k-1}, G_k]; breakpoints are the partial sums G
    jx = cum
    ja = np.arange(n, dtype=float)
    fn = _ConvexPL(0.0, 0.0, np.empty(0), np.zeros(1), np.zeros(1, dtype=np.int64))
    mins, los, his = [], [], []
    for i in range(n - 1):
        fn = fn.window_min(kap).clip(0.0, total)
        fn = fn.add(jx, ja - (i + 0.5), -1)
        mins.append(fn.argmin())
        los.append(fn.lo)
        his.append(fn.hi)
    fn = fn.window_min(kap)
    if not fn.lo <= total <= fn.hi + 1e-12 * max(total, 1.0):
        raise Infeasible("box cannot hold the mass under the cap")
    r = np.empty(n)
    r[-1] = total
    for i in range(n - 2, -1, -1):
        lo = max(r[i + 1] - kap, los[i])
        hi = min(r[i + 1], his[i])
        r[i] = min(max(mins[i], lo), hi)
    return np.diff(np.concatenate([[0.0], r]))


def atomic_cost(a: np.ndarray, b: np.ndarray, h: float) -> float:
    """``½ W2²`` between point masses ``a`` and ``b`` at the same unit-spaced cells (spacing ``h``)."""
    ca, cb = np.cumsum(a), np.cumsum(b)
    cb = cb * (ca[-1] / cb[-1])
    knots = np.union1d(np.concatenate([[0.0], ca]), cb)
    knots = knots[knots <= ca[-1]]
    mid = 0.5 * (knots[:-1] + knots[1:])
    ia = np.minimum(np.searchsorted(ca, mid), a.size - 1)
    ib = np.minimum(np.searchsorted(cb, mid), b.size - 1)
    return float(0.5 * h * h * np.sum(np.diff(knots) * (ia - ib) ** 2))


def _saturated_runs(rho: np.ndarray, g: np.ndarray, cap: float, edges: np.ndarray) -> list:
    """Coordinate extent of each run of cells touched by the projection."""
    moved = (np.abs(rho - g) > 1e-12 * cap) | (rho >= cap * (1 - 1e-12))
    return [(float(edges[s]), float(edges[e + 1])) for s, e in _overfull_runs(moved & (rho > 0))]


def project_k1_1d(g: GridDensity, cap: float, model: str = "continuum") -> ProjectionResult:
    """Exact projection of a 1D density onto ``{ρ <= cap}``.

    Parameters
    ----------
    g : GridDensity
        1D input density.
    cap : float
        Constant upper bound.
    model : {"continuum", "atomic"}
        ``continuum`` treats ``g`` as piecewise constant and returns the
        rasterised exact solution; ``atomic`` solves the cell-centre point-mass
        problem (the same discrete problem as :func:`project_lp`).

    Returns
    -------
    ProjectionResult
        ``diagnostics["intervals"]`` lists the saturated intervals as
        coordinate pairs.
    """
    if g.grid.dim != 1:
        raise ValueError("project_k1_1d is one-dimensional")
    f = ConstraintField.constant(g.grid, cap)
    if cap * g.grid.size * g.grid.spacing < mass(g) * (1 - 1e-12):
        raise Infeasible("cap times box length is below the mass")
    if np.all(g.values <= cap):
        res = identity_result(g, f, f"k1-{model}")
        res.diagnostics["intervals"] = []
        return res
    edges = g.grid.edges()
    if model == "continuum":
        intervals = continuum_intervals(g.values, edges, cap)
        rho = _rasterize(g.values, edges, cap, intervals)
    elif model == "atomic":
        h = g.grid.spacing
        masses = atomic_projection(g.values, h, cap)
        rho = masses / h
        atomic = atomic_cost(masses, g.values * h, h)
        intervals = _saturated_runs(rho, g.values, cap, edges)
    else:
        raise ValueError(f"unknown model {model!r}")
    rho = rho * (mass(g) / (rho.sum() * g.grid.spacing))
    rho_d = GridDensity.clipped(g.grid, np.minimum(rho, cap))
    duals = potentials_1d(rho_d, g)
    w2 = float(np.sqrt(2 * max(duals.dual_value(rho_d, g), 0.0)))
    diag = {"method": f"k1-{model}", "duality_gap": 0.0, "cost": 0.5 * w2 * w2, "w2": w2, "iterations": 0, "intervals": intervals}
    if model == "atomic":
        # cost of the point-mass problem, comparable with project_lp
        diag["cost"] = atomic
        diag["w2"] = float(np.sqrt(2 * atomic))
    return finish(rho, g, f, duals, diag)

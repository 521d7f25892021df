"""Exact one-dimensional optimal transport for piecewise-constant densities.

Everything here is computed from the exact piecewise-linear CDFs of the cell
densities; no sampling is involved. Quantile functions are piecewise linear in
the mass variable (with jumps across empty cells), so squared quantile
differences integrate exactly knot interval by knot interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MassMismatch
from .grid import Grid, GridDensity

MASS_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class QuantileTable:
    """Inverse CDF of a 1D piecewise-constant density.

    Segment ``k`` covers masses ``knots[k]..knots[k+1]`` and runs linearly from
    ``starts[k]`` to ``ends[k]``. Consecutive segments may leave a gap in
    position (empty cells), which is a jump of the quantile function.
    """

    knots: np.ndarray
    starts: np.ndarray
    ends: np.ndarray

    @classmethod
    def from_density(cls, rho: GridDensity) -> "QuantileTable":
        if rho.grid.dim != 1:
            raise ValueError("quantile tables need a 1D density")
        v = rho.values
        edges = rho.grid.edges()
        live = np.flatnonzero(v > 0)
        if live.size == 0:
            raise ValueError("density has zero mass")
        knots = np.concatenate([[0.0], np.cumsum(v[live] * rho.grid.spacing)])
        # cells too light to move the running sum carry no representable mass
        keep = np.diff(knots) > 0
        knots = np.concatenate([[0.0], knots[1:][keep]])
        return cls(knots, edges[live][keep], edges[live + 1][keep])

    @property
    def total(self) -> float:
        return float(self.knots[-1])

    def segment(self, p) -> np.ndarray:
        """Index of the segment containing each mass level (right-continuous)."""
        k = np.searchsorted(self.knots, p, side="right") - 1
        return np.clip(k, 0, len(self.starts) - 1)

    def at(self, p, k=None) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if k is None:
            k = self.segment(p)
        lo, hi = self.knots[k], self.knots[k + 1]
        t = np.clip((p - lo) / (hi - lo), 0.0, 1.0)
        return self.starts[k] + t * (self.ends[k] - self.starts[k])

    __call__ = at


def _check_masses(a: QuantileTable, b: QuantileTable) -> None:
    if abs(a.total - b.total) > MASS_RTOL * max(1.0, a.total, b.total):
        raise MassMismatch(a.total, b.total)


def _merged(a: QuantileTable, b: QuantileTable):
    """Common refinement of two tables: per interval, end values of both quantiles."""
    _check_masses(a, b)
    kb = b.knots * (a.total / b.total)
    p = np.union1d(a.knots, kb)
    lo, hi = p[:-1], p[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    mid = 0.5 * (lo + hi)
    ia, ib = a.segment(mid), np.clip(np.searchsorted(kb, mid, side="right") - 1, 0, len(b.starts) - 1)

    def ends(t: QuantileTable, knots, k):
        span = knots[k + 1] - knots[k]
        safe = np.where(span > 0, span, 1.0)
        rise = t.ends[k] - t.starts[k]
        # fractions first: spans can be subnormal
        t0 = np.clip((lo - knots[k]) / safe, 0.0, 1.0)
        t1 = np.clip((hi - knots[k]) / safe, 0.0, 1.0)
        return t.starts[k] + rise * t0, t.starts[k] + rise * t1

    xa0, xa1 = ends(a, a.knots, ia)
    yb0, yb1 = ends(b, kb, ib)
    return lo, hi, xa0, xa1, yb0, yb1


def w2_squared_tables(a: QuantileTable, b: QuantileTable) -> float:
    """Squared W2 distance between two quantile tables of equal mass."""
    lo, hi, x0, x1, y0, y1 = _merged(a, b)
    d0, d1 = x0 - y0, x1 - y1
    return float(np.sum((hi - lo) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0))


def w2_squared_1d(rho: GridDensity, g: GridDensity) -> float:
    """Squared W2 distance (``∫|F^-1 - G^-1|² dp``) between two 1D densities."""
    return w2_squared_tables(QuantileTable.from_density(rho), QuantileTable.from_density(g))


def w2_1d(rho: GridDensity, g: GridDensity) -> float:
    return float(np.sqrt(max(w2_squared_1d(rho, g), 0.0)))


def monotone_map_1d(rho: GridDensity, g: GridDensity) -> np.ndarray:
    """Monotone rearrangement ``T = G^-1 ∘ F`` at the cell centres of ``rho``.

    Cells where ``rho`` vanishes get NaN.
    """
    qa, qb = QuantileTable.from_density(rho), QuantileTable.from_density(g)
    _check_masses(qa, qb)
    m = rho.values * rho.grid.spacing
    levels = np.cumsum(m) - 0.5 * m
    out = np.full(rho.grid.shape, np.nan)
    live = rho.values > 0
    out[live] = qb.at(levels[live] * (qb.total / qa.total))
    return out


class PiecewiseIntegral:
    """Antiderivative of a piecewise-linear function given on contiguous pieces.

    Piece ``k`` lives on ``[xs[k], xs[k+1]]`` and goes linearly from ``left[k]``
    to ``right[k]``; jumps between pieces are allowed. The result is continuous
    and piecewise quadratic, normalised to vanish at ``xs[0]``.
    """

    def __init__(self, xs, left, right):
        self.xs = np.asarray(xs, dtype=float)
        self.left = np.asarray(left, dtype=float)
        self.right = np.asarray(right, dtype=float)
        w = np.diff(self.xs)
        self.cum = np.concatenate([[0.0], np.cumsum(w * (self.left + self.right) / 2)])
        self.offset = 0.0

    def _piece(self, x):
        return np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, len(self.left) - 1)

    def slope(self, x) -> np.ndarray:
        """Value of the integrand at ``x``."""
        x = np.asarray(x, dtype=float)
        k = self._piece(x)
        w = self.xs[k + 1] - self.xs[k]
        t = np.where(w > 0, (x - self.xs[k]) / np.where(w > 0, w, 1.0), 0.0)
        return self.left[k] + t * (self.right[k] - self.left[k])

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = self._piece(x)
        s = x - self.xs[k]
        return self.cum[k] + s * (self.left[k] + self.slope(x)) / 2 + self.offset

    def cell_integrals(self, edges) -> np.ndarray:
        """Exact integrals of the antiderivative over consecutive ``edges`` intervals."""
        edges = np.asarray(edges, dtype=float)
        inner = self.xs[(self.xs > edges[0]) & (self.xs < edges[-1])]
        pts = np.union1d(edges, inner)
        a, b = pts[:-1], pts[1:]
        # Simpson is exact on each quadratic piece
        part = (b - a) / 6 * (self(a) + 4 * self(0.5 * (a + b)) + self(b))
        acc = np.concatenate([[0.0], np.cumsum(part)])
        idx = np.searchsorted(pts, edges)
        return np.diff(acc[idx])


def _displacement_pieces(src: QuantileTable, dst: QuantileTable, lo_edge: float, hi_edge: float):
    """Pieces of ``x - T(x)`` over ``[lo_edge, hi_edge]`` for ``T = dst^-1 ∘ src``.

    Inside the support the map is linear per knot interval. Across a gap of the
    source support the map is constant, switching from the left to the right
    target value at the midpoint of the gap; outside the support it is the
    extreme target. This is the c-transform extension in one dimension.
    """
    lo, hi, x0, x1, y0, y1 = _merged(src, dst)
    xs, left, right = [lo_edge], [], []

    def flat(a, b, y):
        if b > a:
            xs.append(b)
            left.append(a - y)
            right.append(b - y)

    flat(lo_edge, x0[0], y0[0])
    for k in range(len(lo)):
        if k > 0 and x0[k] > xs[-1]:
            mid = 0.5 * (xs[-1] + x0[k])
            flat(xs[-1], mid, y1[k - 1])
            flat(mid, x0[k], y0[k])
        if x1[k] > xs[-1]:
            xs.append(x1[k])
            left.append(x0[k] - y0[k])
            right.append(x1[k] - y1[k])
    flat(xs[-1], hi_edge, y1[-1])
    return PiecewiseIntegral(xs, left, right)


@dataclass(frozen=True, eq=False)
class DualPotentials:
    """Kantorovich pair on the source and target grids.

    ``phi`` is gauged to vanish at the ``anchor`` cell of the source grid.
    ``slack`` bounds the duality gap reported by the producing solver.
    """

    source_grid: Grid
    target_grid: Grid
    phi: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    anchor: int = 0
    slack: float = 0.0

    def dual_value(self, rho: GridDensity, g: GridDensity) -> float:
        """Midpoint-rule value of ``∫φρ + ∫ψg``."""
        return float(
            (self.phi * rho.values).sum() * rho.grid.cell_volume
            + (self.psi * g.values).sum() * g.grid.cell_volume
        )


@dataclass(frozen=True, eq=False)
class ExactPotentials1D(DualPotentials):
    """1D potentials with their exact piecewise-quadratic representation."""

    phi_fn: PiecewiseIntegral = field(default=None, repr=False)
    psi_fn: PiecewiseIntegral = field(default=None, repr=False)

    def dual_value(self, rho: GridDensity, g: GridDensity) -> float:
        """Exact ``∫φρ + ∫ψg`` for the piecewise-constant densities."""
        a = self.phi_fn.cell_integrals(rho.grid.edges()) @ rho.values
        b = self.psi_fn.cell_integrals(g.grid.edges()) @ g.values
        return float(a + b)

    def grad_phi(self, x) -> np.ndarray:
        return self.phi_fn.slope(x)

    def grad_psi(self, y) -> np.ndarray:
        return self.psi_fn.slope(y)


def potentials_1d(rho: GridDensity, g: GridDensity) -> ExactPotentials1D:
    """Kantorovich potentials for the quadratic cost ``½|x-y|²``.

    ``φ`` integrates ``x - T(x)`` from the leftmost support cell of ``rho``,
    ``ψ`` integrates ``y - S(y)`` with ``S = T^-1``, and the additive constant
    of ``ψ`` is fixed by ``φ(x) + ψ(T(x)) = ½|x - T(x)|²`` at the anchor.
    """
    qa, qb = QuantileTable.from_density(rho), QuantileTable.from_density(g)
    ga, gb = rho.grid, g.grid
    phi_fn = _displacement_pieces(qa, qb, ga.edges()[0], ga.edges()[-1])
    psi_fn = _displacement_pieces(qb, qa, gb.edges()[0], gb.edges()[-1])

    xa = ga.axis()
    anchor = int(np.flatnonzero(rho.values > 0)[0])
    phi_fn.offset = -float(phi_fn(xa[anchor]))
    t_anchor = float(monotone_map_1d(rho, g)[anchor])
    psi_fn.offset = 0.5 * (xa[anchor] - t_anchor) ** 2 - float(psi_fn(t_anchor))

    return ExactPotentials1D(
        ga, gb, phi_fn(xa), psi_fn(gb.axis()), anchor, 0.0, phi_fn=phi_fn, psi_fn=psi_fn
    )

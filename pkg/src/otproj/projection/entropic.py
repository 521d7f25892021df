"""Entropic proximal scaling on grids.

All entropic solvers here minimise

    <C, γ> + ε KL(γ | e^{-C/ε}) + F(γ 1)    subject to  γ^T 1 = g,

over couplings ``γ`` between the grid cells (rows: the unknown density, columns:
the data ``g``). The column constraint is an exact scaling step; the row term
``F = Σ_i F_i(r_i)`` is handled by the pointwise KL proximal map

    r_i = argmin_r F_i(r) + ε KL(r | s_i),   i.e.   ε log r + F_i'(r) = ε log s_i,

which is a hard truncation for a density cap and a scalar bisection otherwise.
Potentials are kept in the log domain, and the kernel is applied axis by axis
because ``½|x - y|²`` splits over coordinates.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from ..errors import Cancelled, NonFiniteBisection, NotConverged
from ..grid import ConstraintField, Grid, GridDensity, mass
from .result import ProjectionResult, canonical_duals, check_feasible, finish

_F_FLOOR = 1e-6


class LogKernel:
    """Log-domain application of ``exp(-½|x - y|²/ε)`` on one grid."""

    def __init__(self, grid: Grid, eps: float):
        self.grid = grid
        self.eps = float(eps)
        self.blocks = []
        for k in range(grid.dim):
            x = grid.axis(k)
            self.blocks.append(-0.5 * (x[:, None] - x[None, :]) ** 2 / self.eps)

    def __call__(self, w: np.ndarray) -> np.ndarray:
        """``out_i = log Σ_j exp(w_j - ½|x_i - x_j|²/ε)``, entries of ``w`` may be ``-inf``."""
        out = np.asarray(w, dtype=float).reshape(self.grid.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            for k, m in enumerate(self.blocks):
                moved = np.moveaxis(out, k, -1)
                red = logsumexp(moved[..., None, :] + m, axis=-1)
                out = np.moveaxis(red, -1, k)
        return out


def scaling_loop(
    g: GridDensity,
    eps: float,
    row_prox: Callable,
    max_iter: int = 20000,
    tol: float = 1e-9,
    stages: int = 4,
    callback: Optional[Callable] = None,
    cancel=None,
):
    """Run the proximal scaling iteration with a geometric ε ladder ending at ``eps``.

    Parameters
    ----------
    g : GridDensity
        Column marginal (data).
    eps : float
        Final entropic parameter, in units of the cost ``½|x - y|²``.
    row_prox : callable
        ``row_prox(log_s, eps) -> log_r``, the pointwise KL prox of ``F``.
    tol : float
        Stop when the L1 column-marginal error is below ``tol * mass(g)``.

    Returns
    -------
    tuple
        ``(row_masses, u, v, iterations, error)`` with ``u, v`` the log-domain
        potentials on the whole grid (``v = -inf`` off the support of ``g``).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    grid = g.grid
    b = g.values * grid.cell_volume
    with np.errstate(divide="ignore"):
        logb = np.log(b)
    total = float(b.sum())
    ladder = eps * np.geomspace(10.0 ** max(stages - 1, 0), 1.0, max(stages, 1))
    ladder = ladder[ladder <= max(eps, grid.diameter**2)]
    u = np.zeros(grid.shape)
    v = np.zeros(grid.shape)
    it, err = 0, math.inf
    for k, e in enumerate(ladder):
        kern = LogKernel(grid, e)
        stage_tol = tol if k == len(ladder) - 1 else max(tol, 1e-5)
        while True:
            v = np.where(b > 0, e * (logb - kern(u / e)), -np.inf)
            log_s = kern(v / e)
            u = e * (row_prox(log_s, e) - log_s)
            it += 1
            if it % 5 == 0 or it >= max_iter:
                with np.errstate(divide="ignore"):
                    col = np.exp(v / e + kern(u / e))
                err = float(np.abs(np.where(b > 0, col, 0.0) - b).sum()) / total
                if callback is not None:
                    callback(it, err)
                if cancel is not None and cancel.is_set():
                    raise Cancelled("scaling loop cancelled")
                if err < stage_tol:
                    break
                if it >= max_iter:
                    raise NotConverged(max_iter, err)
    kern = LogKernel(grid, ladder[-1])
    rows = np.exp(u / ladder[-1] + kern(v / ladder[-1]))
    return rows, u, v, it, err


def bisect_log(lhs: Callable, target: np.ndarray, lo: float, hi: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Vectorised bisection for the increasing ``lhs(y) = target`` on ``[lo, hi]`` (log scale).

    Entries whose root lies outside the bracket are clamped to its ends.
    """
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    lo = np.full(target.shape, float(lo))
    f_hi = lhs(hi) - target
    if np.any(np.isnan(f_hi)):
        raise NonFiniteBisection("prox equation is not finite at the bracket end")
    done = f_hi <= 0
    a, c = lo.copy(), hi.copy()
    steps = int(np.ceil(np.log2(max(float(np.max(hi - lo)), tol) / tol))) + 1
    for _ in range(steps):
        mid = 0.5 * (a + c)
        fm = lhs(mid) - target
        if np.any(np.isnan(fm)):
            raise NonFiniteBisection("prox equation produced NaN")
        up = fm > 0
        c = np.where(up, mid, c)
        a = np.where(up, a, mid)
    return np.where(done, hi, 0.5 * (a + c))


def _cap_prox(cap_mass: np.ndarray) -> Callable:
    with np.errstate(divide="ignore"):
        log_cap = np.log(cap_mass)
    return lambda log_s, eps: np.minimum(log_s, log_cap)


def project_entropic(
    g: GridDensity,
    f: ConstraintField,
    eps: Optional[float] = None,
    max_iter: int = 20000,
    tol: float = 1e-9,
    callback: Optional[Callable] = None,
    cancel=None,
) -> ProjectionResult:
    """Entropic W2 projection of ``g`` onto ``{ρ <= f}``.

    The row step truncates the row sums at ``f * cellvol``, which is the KL
    projection onto the capacity constraint; the column step rescales to
    ``g``. ``eps`` defaults to ``1e-4 * diameter²``.
    """
    check_feasible(g, f)
    grid = g.grid
    eps = 1e-4 * grid.diameter**2 if eps is None else float(eps)
    rows, u, v, it, err = scaling_loop(
        g, eps, _cap_prox(f.values * grid.cell_volume), max_iter, tol, callback=callback, cancel=cancel
    )
    rho = rows / grid.cell_volume
    support = g.values > 0
    duals = canonical_duals(GridDensity.clipped(grid, rho), g, v[support], err)
    diag = {"method": "entropic", "eps": eps, "iterations": it, "marginal_error": err, "duality_gap": float("nan")}
    return finish(np.minimum(rho, f.values), g, f, duals, diag)


def floored_constraint(f: ConstraintField) -> ConstraintField:
    vals = f.values
    if np.any(vals < _F_FLOOR):
        warnings.warn(f"constraint floored at {_F_FLOOR:g} for the penalised problem", RuntimeWarning, stacklevel=3)
        return ConstraintField(f.grid, np.maximum(vals, _F_FLOOR))
    return f


def derivative_prox(deriv: Callable, scale: float = 1.0, upper: Optional[np.ndarray] = None) -> Callable:
    """Prox of ``F(r) = scale * Σ_i Φ_i(r_i)`` given ``Φ_i'`` as ``deriv(log_r)``.

    Solves ``ε log r + scale * Φ'(r) = ε log s`` by bisection in ``log r``. The
    root is at most ``log s`` when ``Φ' >= 0``; otherwise the bracket is
    widened until it holds the root. ``upper`` caps ``r`` (effective domain).
    """

    def prox(log_s, eps):
        finite = np.isfinite(log_s)
        out = np.full(log_s.shape, -np.inf)
        if not finite.any():
            return out
        ls = log_s[finite]

        def lhs(y):
            with np.errstate(over="ignore", invalid="ignore"):
                d = scale * deriv(y, finite)
            return eps * y + d

        hi = ls.copy()
        for _ in range(60):
            bad = lhs(hi) - eps * ls < 0
            if not bad.any():
                break
            hi = np.where(bad, hi + np.maximum(1.0, np.abs(hi)), hi)
        lo = min(-800.0, float(ls.min()) - 50.0)
        y = bisect_log(lhs, eps * ls, lo, hi)
        if upper is not None:
            with np.errstate(divide="ignore"):
                y = np.minimum(y, np.log(upper[finite]))
        out[finite] = y
        return out

    return prox


def project_penalized(
    g: GridDensity,
    f: ConstraintField,
    m: int,
    eps_m: Optional[float] = None,
    eps: Optional[float] = None,
    max_iter: int = 20000,
    tol: float = 1e-9,
    callback: Optional[Callable] = None,
    cancel=None,
) -> GridDensity:
    """Minimiser of ``½W2²(g, ρ) + ∫ H_m(ρ/f)`` with ``H_m(t) = t^{m+1}/(m+1) + ε_m t²/2``.

    Args:
        g: data density.
        f: positive constraint field; values below ``1e-6`` are floored with a warning.
        m: penalty exponent, at least 2.
        eps_m: quadratic weight, ``2^{-m²}`` by default.
        eps: entropic parameter, ``1e-4 * diameter²`` by default.

    Returns:
        The penalised minimiser as a GridDensity.
    """
    from .integrands import eps_schedule

    if int(m) != m or m < 2:
        raise ValueError("m must be an integer >= 2")
    m = int(m)
    if not g.grid.same_as(f.grid):
        raise ValueError("density and constraint must share a grid")
    f = floored_constraint(f)
    grid = g.grid
    em = eps_schedule(m) if eps_m is None else float(eps_m)
    eps = 1e-4 * grid.diameter**2 if eps is None else float(eps)
    vol = grid.cell_volume
    fv = f.values

    def deriv(y, sel):
        t = np.exp(y) / (vol * fv[sel])
        return (np.power(t, m) + em * t) / fv[sel]

    rows, *_ = scaling_loop(g, eps, derivative_prox(deriv), max_iter, tol, callback=callback, cancel=cancel)
    rho = rows / vol
    return GridDensity.clipped(grid, rho * (mass(g) / (rho.sum() * vol)))

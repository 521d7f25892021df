"""Proximal (JKO) steps ``argmin (1/2τ) W2²(ρ, ρ_prev) + ∫ h(ρ)`` and optimality residuals."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solveh_banded

from ..discrete import solve_ot_lp
from ..errors import InstanceTooLarge, NotConverged
from ..grid import ConstraintField, GridDensity, mass
from ..ot1d import QuantileTable, potentials_1d
from .entropic import derivative_prox, floored_constraint, scaling_loop
from .integrands import ConvexIntegrand, eps_schedule
from .interval import project_k1_1d

LAGRANGIAN_MAX_CELLS = 1 << 16


def jko_step(
    rho_prev: GridDensity,
    h: ConvexIntegrand,
    tau: float,
    method: str = "entropic",
    eps: Optional[float] = None,
    max_iter: int = 20000,
    tol: float = 1e-9,
    refine: int = 2,
    callback: Optional[Callable] = None,
    cancel=None,
) -> GridDensity:
    """One implicit step of the Wasserstein gradient flow of ``∫ h(ρ)``.

    Parameters
    ----------
    rho_prev : GridDensity
        Previous iterate.
    h : ConvexIntegrand
        Energy density.
    tau : float
        Step size.
    method : {"entropic", "lp"}
        ``entropic`` runs the proximal scaling loop with the KL prox of
        ``τ h`` (any dimension). ``lp`` is exact in 1D: the problem is
        convex in the quantile function of the unknown and is solved by
        Newton's method on a mass grid refined ``refine`` times per cell.
    eps : float, optional
        Entropic parameter, ``1e-2 * tau * h_min²`` scaled by the grid by
        default (see :func:`default_eps`).

    Returns
    -------
    GridDensity
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if h.is_zero:
        return rho_prev
    if method == "lp":
        if rho_prev.grid.dim != 1:
            raise ValueError("the lp method is one-dimensional")
        if rho_prev.grid.size * refine > LAGRANGIAN_MAX_CELLS:
            raise InstanceTooLarge(f"{rho_prev.grid.size * refine} mass nodes exceed {LAGRANGIAN_MAX_CELLS}")
        if _is_indicator(h):
            return project_k1_1d(rho_prev, h.upper, model="continuum").density
        return lagrangian_step_1d(rho_prev, h, tau, refine=refine, max_iter=min(max_iter, 500))
    if method != "entropic":
        raise ValueError(f"unknown method {method!r}")
    grid = rho_prev.grid
    vol = grid.cell_volume
    eps = default_eps(grid, tau) if eps is None else float(eps)

    def deriv(y, sel):
        return np.asarray(h.deriv(np.exp(y) / vol), dtype=float)

    upper = None
    if math.isfinite(h.upper):
        upper = np.full(grid.shape, h.upper * vol)
    prox = derivative_prox(deriv, scale=tau, upper=upper)
    rows, *_ = scaling_loop(rho_prev, eps, prox, max_iter, tol, callback=callback, cancel=cancel)
    rho = rows / vol
    return GridDensity.clipped(grid, rho * (mass(rho_prev) / (rho.sum() * vol)))


def default_eps(grid, tau: float) -> float:
    """Entropic parameter small against both ``τ`` and the squared cell size."""
    return min(1e-4 * grid.diameter**2, 0.05 * tau, 0.5 * grid.spacing**2)


def _is_indicator(h: ConvexIntegrand) -> bool:
    if not math.isfinite(h.upper):
        return False
    t = np.linspace(0.0, h.upper, 33)
    return bool(np.all(np.asarray(h.value(t)) == 0.0) and np.all(np.asarray(h.deriv(t)) == 0.0))


# exact 1D step ---------------------------------------------------------------


def _mass_grid(rho: GridDensity, refine: int):
    """Mass levels ``p`` and the quantile of ``rho`` on both sides of each mass interval."""
    q = QuantileTable.from_density(rho)
    t = np.linspace(0.0, 1.0, refine + 1)
    lo, hi = q.knots[:-1], q.knots[1:]
    p = (lo[:, None] + (hi - lo)[:, None] * t[None, :])[:, :-1].ravel()
    p = np.append(p, q.knots[-1])
    a, b = q.starts, q.ends
    x = (a[:, None] + (b - a)[:, None] * t[None, :])
    y_left = x[:, :-1].ravel()
    y_right = x[:, 1:].ravel()
    # negligible mass intervals make the Newton system numerically singular
    keep = np.diff(p) > 1e-13 * p[-1]
    return p, y_left[keep], y_right[keep], keep


class QuantileProblem:
    """Objective of the 1D step in quantile form.

    The unknown is the quantile ``X`` at mass nodes ``p_k``, linear in between,
    so the density is ``D_k / ΔX_k`` on ``[X_k, X_{k+1}]``. The objective

        (1/2τ) ∫ (X - Y)² dp + Σ_k ΔX_k h(D_k / ΔX_k)

    is convex (the second term is a perspective of ``h``) with a tridiagonal
    Hessian. Integrals of ``(X - Y)²`` are exact since both are linear on each
    mass interval. The box walls and a finite effective domain of ``h``
    (``ΔX_k >= D_k / upper``) enter through a log barrier of weight ``mu``.
    """

    def __init__(self, rho_prev: GridDensity, h: ConvexIntegrand, tau: float, refine: int = 2):
        grid = rho_prev.grid
        p, ya, yb, keep = _mass_grid(rho_prev, refine)
        self.p = np.concatenate([[p[0]], p[1:][keep]])
        self.dm = np.diff(self.p)
        self.ya, self.yb = ya, yb
        self.h, self.tau = h, float(tau)
        self.lo, self.hi = float(grid.lower[0]), float(grid.upper[0])
        self.upper = h.upper if math.isfinite(h.upper) else None
        self.scale = float(self.dm.sum()) * grid.spacing**2 / tau
        self.grid = grid

    def evaluate(self, x: np.ndarray, mu: float):
        """``(value, gradient, hessian diagonal, hessian off-diagonal)``, or None outside the domain."""
        dm, tau, h = self.dm, self.tau, self.h
        dx = np.diff(x)
        if np.any(dx <= 0) or x[0] <= self.lo or x[-1] >= self.hi:
            return None
        if self.upper is not None and np.any(dx <= dm / self.upper):
            return None
        r = dm / dx
        a, b = x[:-1] - self.ya, x[1:] - self.yb
        hv, hd = np.asarray(h.value(r), dtype=float), np.asarray(h.deriv(r), dtype=float)
        val = (dm * (a * a + a * b + b * b)).sum() / (6 * tau) + (dx * hv).sum()
        # d/dΔX of ΔX h(D/ΔX) is h(r) - r h'(r); second derivative r² h''(r) / ΔX
        e1 = hv - r * hd
        e2 = r * r * h.curvature(r) / dx
        if self.upper is not None:
            slack = dx - dm / self.upper
            val -= mu * np.log(slack).sum()
            e1 = e1 - mu / slack
            e2 = e2 + mu / slack**2
        s0, s1 = x[0] - self.lo, self.hi - x[-1]
        val -= mu * (np.log(s0) + np.log(s1))
        if not np.isfinite(val):
            return None
        n = len(dm)
        grad = np.zeros(n + 1)
        grad[:-1] += dm * (2 * a + b) / (6 * tau) - e1
        grad[1:] += dm * (a + 2 * b) / (6 * tau) + e1
        grad[0] -= mu / s0
        grad[-1] += mu / s1
        diag = np.zeros(n + 1)
        diag[:-1] += dm / (3 * tau) + e2
        diag[1:] += dm / (3 * tau) + e2
        diag[0] += mu / s0**2
        diag[-1] += mu / s1**2
        off = dm / (6 * tau) - e2
        return val, grad, diag, off

    def start(self) -> np.ndarray:
        """Strictly feasible initial nodes near the quantiles of ``rho_prev``."""
        dm, lo, hi = self.dm, self.lo, self.hi
        n = len(dm)
        x = np.concatenate([self.ya, [self.yb[-1]]])
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        if self.upper is not None:
            need = dm / self.upper
            if need.sum() >= hi - lo:
                raise InstanceTooLarge("box cannot hold the mass within the effective domain of h")
            dx = np.maximum(np.diff(x), need)
            if dx.sum() >= (hi - lo) * (1 - 1e-6):
                dx = need + ((hi - lo) * (1 - 1e-6) - need.sum()) / n
            x = np.concatenate([[0.0], np.cumsum(dx)])
            x = x - 0.5 * x[-1] + np.clip(0.5 * (x[0] + x[-1]) + mid, lo + 0.5 * x[-1], hi - 0.5 * x[-1]) - mid
            return x + mid
        x = mid + (x - mid) * (1 - 1e-3 * self.grid.spacing / half)
        return x + 1e-9 * self.grid.spacing * np.linspace(-1.0, 1.0, n + 1)


def lagrangian_step_1d(
    rho_prev: GridDensity, h: ConvexIntegrand, tau: float, refine: int = 2, max_iter: int = 200, rtol: float = 1e-13
) -> GridDensity:
    """Exact 1D step by damped Newton on :class:`QuantileProblem` with a shrinking barrier."""
    prob = QuantileProblem(rho_prev, h, tau, refine)
    x = prob.start()
    for mu in prob.scale * np.geomspace(1e-2, 1e-14, 7):
        cur = prob.evaluate(x, mu)
        if cur is None:
            raise NotConverged(0, float("inf"))
        for _ in range(max_iter):
            val, grad, diag, off = cur
            # Jacobi scaling: wall barriers and near-empty mass intervals differ by many decades
            w = 1.0 / np.sqrt(diag)
            band = np.zeros((2, len(x)))
            band[0, 1:] = off * w[:-1] * w[1:]
            band[1] = 1.0
            step = -w * solveh_banded(band, w * grad)
            dec = -float(grad @ step)
            if dec <= rtol * prob.scale:
                break
            t, trial = 1.0, None
            while t > 1e-20:
                trial = prob.evaluate(x + t * step, mu)
                if trial is not None and trial[0] <= val - 0.25 * t * dec:
                    break
                t, trial = 0.5 * t, None
            if trial is None:
                break
            x, cur = x + t * step, trial
        else:
            raise NotConverged(max_iter, dec)
    return _rasterize_quantile(rho_prev.grid, prob.p, x, mass(rho_prev))


def _rasterize_quantile(grid, p, x, total: float) -> GridDensity:
    """Cell averages of the density whose quantile interpolates ``(p_k, x_k)``."""
    edges = grid.edges()
    cdf = np.interp(edges, x, p, left=0.0, right=p[-1])
    vals = np.diff(cdf) / grid.spacing
    return GridDensity.clipped(grid, vals * (total / (vals.sum() * grid.spacing)))


# optimality residuals ----------------------------------------------------------


def _potential(rho_bar: GridDensity, g: GridDensity) -> np.ndarray:
    if rho_bar.grid.dim == 1:
        return potentials_1d(rho_bar, g).phi
    return solve_ot_lp(rho_bar, g)[1].phi


def _residual(rho_bar: GridDensity, phi: np.ndarray, hd: np.ndarray, d0: float, delta: float) -> float:
    rho = rho_bar.values
    sel = rho > delta * rho.max()
    if not sel.any():
        return 0.0
    c = float(np.mean(hd[sel] + phi[sel]))
    live = rho > 0
    target = np.maximum(c - phi[live], d0)
    return float((rho[live] * np.abs(hd[live] - target)).sum() * rho_bar.grid.cell_volume)


def optimality_residual(
    rho_bar: GridDensity, g: GridDensity, h: ConvexIntegrand, tau: float = 1.0, delta: float = 1e-3
) -> float:
    """Weighted L1 defect of ``τ h'(ρ̄) = max(C - φ, τ h'(0))``.

    ``φ`` is the Kantorovich potential from ``ρ̄`` to ``g`` (exact in 1D, LP
    in 2D). ``C`` is fitted by least squares over ``{ρ̄ > delta * max ρ̄}``.
    The result is ``∫ ρ̄ |τ h'(ρ̄) - max(C - φ, τ h'(0))|``.
    """
    phi = _potential(rho_bar, g)
    with np.errstate(divide="ignore"):
        hd = tau * np.asarray(h.deriv(rho_bar.values), dtype=float)
    return _residual(rho_bar, phi, hd, tau * h.d0, delta)


def penalized_optimality_residual(
    rho_m: GridDensity,
    g: GridDensity,
    f: ConstraintField,
    m: int,
    eps_m: Optional[float] = None,
    delta: float = 1e-3,
) -> float:
    """Weighted L1 defect of ``φ + H_m'(ρ/f)/f = C`` with the fitted constant ``C``.

    ``H_m'(0) = 0``, so the defect is measured against ``max(C - φ, 0)`` as in
    :func:`optimality_residual`, to which it reduces for ``f ≡ 1``.
    """
    f = floored_constraint(f)
    em = eps_schedule(m) if eps_m is None else float(eps_m)
    t = rho_m.values / f.values
    hd = (np.power(t, m) + em * t) / f.values
    return _residual(rho_m, _potential(rho_m, g), hd, 0.0, delta)

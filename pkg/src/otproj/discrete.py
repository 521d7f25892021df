"""Discrete optimal transport on grids: exact LP and log-domain Sinkhorn.

Cell densities are quantised to point masses at cell centres. The cost is
``½|x - y|²`` throughout; reported W2 values are ``sqrt(2 * cost)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import Cancelled, InstanceTooLarge, MassMismatch, NotConverged, SolverFailure
from .grid import Grid, GridDensity, mass
from .ot1d import MASS_RTOL, DualPotentials

DEFAULT_CAP = 4096 * 4096

for _backend in ("PYTORCH", "JAX", "CUPY", "TENSORFLOW"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Sparse coupling between the cells of two grids (flat row-major indices)."""

    source_grid: Grid
    target_grid: Grid
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    cost: float = 0.0

    def source_marginal(self) -> np.ndarray:
        out = np.bincount(self.rows, self.weights, minlength=self.source_grid.size)
        return out.reshape(self.source_grid.shape)

    def target_marginal(self) -> np.ndarray:
        out = np.bincount(self.cols, self.weights, minlength=self.target_grid.size)
        return out.reshape(self.target_grid.shape)

    @property
    def w2(self) -> float:
        return float(np.sqrt(max(2.0 * self.cost, 0.0)))

    def displacements(self) -> np.ndarray:
        x = self.source_grid.points()[self.rows]
        y = self.target_grid.points()[self.cols]
        return np.linalg.norm(x - y, axis=1)


def sq_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Matrix of ``½|x_i - y_j|²`` for point arrays of shape ``(n, d)``, ``(m, d)``."""
    d = x[:, None, :] - y[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", d, d)


def _check_equal_mass(rho, g) -> None:
    ma, mb = mass(rho), mass(g)
    if abs(ma - mb) > MASS_RTOL * max(1.0, ma, mb):
        raise MassMismatch(ma, mb)


def _supports(rho, g, cap):
    src = np.flatnonzero(rho.values.ravel() > 0)
    dst = np.flatnonzero(g.values.ravel() > 0)
    if src.size * dst.size > cap:
        raise InstanceTooLarge(f"{src.size} x {dst.size} cost entries exceed the cap {cap}")
    return src, dst


def emd_with_duals(a: np.ndarray, b: np.ndarray, cost: np.ndarray, max_iter: int = 10**8):
    """Network simplex. Returns ``(plan, u, v, primal, relative_gap)``.

    The gap is relative to ``Σ|u|a + Σ|v|b``, the size of the terms summed in
    the dual objective, so round-off in potentials of order ``max c`` does
    not dominate when the optimal cost itself is tiny.
    """
    plan, log = ot.emd(a, b, cost, numItermax=max_iter, log=True)
    if log.get("result_code", 1) != 1:
        raise SolverFailure(log.get("warning") or "network simplex did not reach optimality")
    u, v = np.asarray(log["u"]), np.asarray(log["v"])
    primal = float((plan * cost).sum())
    dual = float(u @ a + v @ b)
    terms = float(np.abs(u) @ a + np.abs(v) @ b)
    scale = max(abs(primal), abs(dual), terms, 1e-300)
    return plan, u, v, primal, abs(primal - dual) / scale


def c_transform(chi, chi_grid: Grid, out_grid: Grid, support=None, block: int = 2048) -> np.ndarray:
    """``chi^c(y) = min_x ½|x - y|² - chi(x)`` for every cell ``y`` of ``out_grid``.

    The minimum runs over all cells of ``chi_grid`` (or those flagged in
    ``support``); exact, by blocks of rows.
    """
    chi = np.asarray(chi, dtype=float).ravel()
    x = chi_grid.points()
    if support is not None:
        keep = np.asarray(support, dtype=bool).ravel()
        x, chi = x[keep], chi[keep]
    y = out_grid.points()
    out = np.empty(len(y))
    for s in range(0, len(y), block):
        out[s : s + block] = (sq_cost(y[s : s + block], x) - chi[None, :]).min(axis=1)
    return out.reshape(out_grid.shape)


def solve_ot_lp(rho: GridDensity, g: GridDensity, cap: int = DEFAULT_CAP):
    """Exact discrete OT between two grid densities of equal mass.

    Returns ``(TransportPlan, DualPotentials)``. The duals are shifted so that
    ``phi`` vanishes at the first support cell of ``rho``, then made canonical
    by ``phi = psi^c`` over the support of ``g`` and ``psi = phi^c`` over the
    support of ``rho``.
    """
    _check_equal_mass(rho, g)
    src, dst = _supports(rho, g, cap)
    a = rho.values.ravel()[src] * rho.grid.cell_volume
    b = g.values.ravel()[dst] * g.grid.cell_volume
    b = b * (a.sum() / b.sum())
    xs, yt = rho.grid.points()[src], g.grid.points()[dst]
    cost = sq_cost(xs, yt)
    plan, u, v, primal, gap = emd_with_duals(a, b, cost)
    shift = u[0]
    v = v + shift

    phi = c_transform(_scatter(v, dst, g.grid), g.grid, rho.grid, support=_mask(dst, g.grid))
    psi = c_transform(phi, rho.grid, g.grid, support=_mask(src, rho.grid))
    i, j = np.nonzero(plan > 0)
    tp = TransportPlan(rho.grid, g.grid, src[i], dst[j], plan[i, j], primal)
    duals = DualPotentials(rho.grid, g.grid, phi, psi, int(src[0]), gap)
    return tp, duals


def _mask(idx, grid: Grid) -> np.ndarray:
    m = np.zeros(grid.size, dtype=bool)
    m[idx] = True
    return m


def _scatter(vals, idx, grid: Grid) -> np.ndarray:
    out = np.zeros(grid.size)
    out[idx] = vals
    return out


def sinkhorn(
    rho: GridDensity,
    g: GridDensity,
    eps: float,
    max_iter: int = 20000,
    tol: float = 1e-9,
    stages: int = 6,
    callback: Optional[Callable] = None,
    cancel=None,
    cap: int = DEFAULT_CAP,
):
    """Entropic OT by log-domain Sinkhorn with a geometric ε ladder from ``10 * eps``.

    Stops once the L1 error of the target marginal is below ``tol`` at the
    final ``eps``. Returns ``(TransportPlan, DualPotentials)``; the plan's cost
    is the transport part ``<c, γ>`` without the entropy term.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    _check_equal_mass(rho, g)
    src, dst = _supports(rho, g, cap)
    a = rho.values.ravel()[src] * rho.grid.cell_volume
    b = g.values.ravel()[dst] * g.grid.cell_volume
    b = b * (a.sum() / b.sum())
    cost = sq_cost(rho.grid.points()[src], g.grid.points()[dst])
    loga, logb = np.log(a), np.log(b)
    u, v = np.zeros(len(a)), np.zeros(len(b))
    ladder = eps * np.geomspace(10.0, 1.0, max(stages, 1))
    it, err = 0, np.inf
    for k, e in enumerate(ladder):
        last = k == len(ladder) - 1
        stage_tol = tol if last else max(tol, 1e-6)
        while True:
            v = e * (logb - logsumexp((u[:, None] - cost) / e, axis=0))
            u = e * (loga - logsumexp((v[None, :] - cost) / e, axis=1))
            it += 1
            if it % 10 == 0 or it >= max_iter:
                col = np.exp(logsumexp((u[:, None] + v[None, :] - cost) / e, axis=0))
                err = float(np.abs(col - b).sum())
                if callback is not None:
                    callback(it, err)
                if cancel is not None and cancel.is_set():
                    raise Cancelled("sinkhorn cancelled")
                if err < stage_tol:
                    break
                if it >= max_iter:
                    raise NotConverged(max_iter, err)
    plan = np.exp((u[:, None] + v[None, :] - cost) / eps)
    i, j = np.nonzero(plan > 0)
    tp = TransportPlan(rho.grid, g.grid, src[i], dst[j], plan[i, j], float((plan * cost).sum()))
    shift = u[0]
    phi = _scatter(u - shift, src, rho.grid).reshape(rho.grid.shape)
    psi = _scatter(v + shift, dst, g.grid).reshape(g.grid.shape)
    return tp, DualPotentials(rho.grid, g.grid, phi, psi, int(src[0]), err)

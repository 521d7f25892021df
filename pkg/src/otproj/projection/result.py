"""Projection result container and shared bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..discrete import TransportPlan, c_transform
from ..errors import Infeasible
from ..grid import ConstraintField, GridDensity, mass
from ..ot1d import DualPotentials

SATURATION_RTOL = 1e-3


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    """Projected density with its certificate data.

    ``saturated`` flags cells where the cap is active (``ρ̄ ≥ f(1 - 1e-3)``);
    ``threshold`` is the level ``ℓ`` separating saturated cells (``φ < ℓ``) from
    the rest.
    """

    density: GridDensity
    duals: Optional[DualPotentials]
    threshold: float
    saturated: np.ndarray = field(repr=False)
    diagnostics: dict = field(default_factory=dict)
    plan: Optional[TransportPlan] = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {"threshold": self.threshold, "saturated_cells": int(self.saturated.sum())}
        out.update({k: v for k, v in self.diagnostics.items() if np.isscalar(v)})
        return out


def check_feasible(g: GridDensity, f: ConstraintField) -> None:
    if not g.grid.same_as(f.grid):
        raise ValueError("density and constraint must share a grid")
    need, have = mass(g), f.capacity()
    if have < need * (1 - 1e-12):
        raise Infeasible(f"constraint capacity {have:.6g} is below the mass {need:.6g}")


def saturation_mask(rho: np.ndarray, f: np.ndarray) -> np.ndarray:
    return (f > 0) & (rho >= f * (1 - SATURATION_RTOL))


def threshold_from(phi: np.ndarray, rho: np.ndarray, f: np.ndarray) -> float:
    """Largest potential over cells more than half full; ``-inf`` if none."""
    sel = (f > 0) & (rho > 0.5 * f)
    return float(phi[sel].max()) if np.any(sel) else -np.inf


def canonical_duals(rho_bar: GridDensity, g: GridDensity, psi_support: np.ndarray, slack: float) -> DualPotentials:
    """Gauge ``ψ`` given on ``spt(g)``, then ``φ = ψ^c`` everywhere and ``ψ = φ^c``."""
    grid = g.grid
    support = g.values.ravel() > 0
    psi = np.zeros(grid.size)
    psi[support] = psi_support
    phi = c_transform(psi, grid, grid, support=support)
    live = rho_bar.values.ravel() > 0
    anchor = int(np.flatnonzero(live)[0]) if live.any() else 0
    shift = phi.ravel()[anchor]
    phi = phi - shift
    psi_full = c_transform(phi, grid, grid, support=live if live.any() else None)
    return DualPotentials(grid, grid, phi, psi_full, anchor, slack)


def identity_result(g: GridDensity, f: ConstraintField, method: str) -> ProjectionResult:
    """Result for ``g <= f``: nothing moves."""
    phi = np.zeros(g.grid.shape)
    duals = DualPotentials(g.grid, g.grid, phi, phi.copy(), 0, 0.0)
    diag = {"method": method, "duality_gap": 0.0, "violation": 0.0, "cost": 0.0, "w2": 0.0, "iterations": 0}
    return ProjectionResult(g, duals, 0.0, saturation_mask(g.values, f.values), diag)


def finish(rho_vals: np.ndarray, g: GridDensity, f: ConstraintField, duals, diag: dict, plan=None) -> ProjectionResult:
    rho = GridDensity.clipped(g.grid, rho_vals)
    diag = dict(diag)
    diag["violation"] = float(max(0.0, (rho.values - f.values).max()))
    diag["mass_error"] = abs(mass(rho) - mass(g))
    ell = threshold_from(duals.phi, rho.values, f.values) if duals is not None else float("nan")
    return ProjectionResult(rho, duals, ell, saturation_mask(rho.values, f.values), diag, plan)

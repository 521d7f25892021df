"""Exact projection onto ``{ρ <= f}`` by network simplex.

The projection is a transport problem with an inequality on the source side:
every cell may receive at most ``f * cellvol``. Adding a zero-cost dummy target
that absorbs the unused capacity turns it into a balanced problem.
"""

from __future__ import annotations

import numpy as np

from ..discrete import DEFAULT_CAP, TransportPlan, emd_with_duals, sq_cost
from ..errors import InstanceTooLarge
from ..grid import ConstraintField, GridDensity
from .result import ProjectionResult, canonical_duals, check_feasible, finish, identity_result

# Direction of the tie-breaking tilt; irrational slope avoids lattice ties in 2D.
_TILT_DIRECTION = np.array([1.0, np.sqrt(2.0) - 1.0])
TILT = 1e-6


def tilt_weights(grid, cells) -> np.ndarray:
    """Per-cell tilt: position along a fixed direction, measured from the lower box corner."""
    pts = grid.points()[cells] - grid.lower
    return pts @ _TILT_DIRECTION[: grid.dim]


def project_lp(
    g: GridDensity,
    f: ConstraintField,
    cap: int = DEFAULT_CAP,
    tilt: float = TILT,
) -> ProjectionResult:
    """W2 projection of ``g`` onto densities bounded by ``f``.

    The LP optimum need not be unique on a lattice. Every cell's occupancy is
    charged an extra ``tilt * h * (position along a fixed direction)``, which
    picks the optimum with the smallest first moment along that direction. Pass
    ``tilt=0`` for the raw LP.

    The reported ``cost`` excludes the tilt; the duality gap refers to the
    problem actually solved.
    """
    check_feasible(g, f)
    grid = g.grid
    if np.all(g.values <= f.values):
        return identity_result(g, f, "lp")
    vol = grid.cell_volume
    src = np.flatnonzero(f.values.ravel() > 0)
    dst = np.flatnonzero(g.values.ravel() > 0)
    if src.size * (dst.size + 1) > cap:
        raise InstanceTooLarge(f"{src.size} x {dst.size + 1} cost entries exceed the cap {cap}")
    a = f.values.ravel()[src] * vol
    b = g.values.ravel()[dst] * vol
    pts = grid.points()
    base = sq_cost(pts[src], pts[dst])
    cost = base + (tilt * grid.spacing) * tilt_weights(grid, src)[:, None]
    spare = a.sum() - b.sum()
    dummy = spare > 1e-14 * a.sum()
    if dummy:
        b = np.append(b, spare)
        cost = np.hstack([cost, np.zeros((len(src), 1))])
    else:
        a = a * (b.sum() / a.sum())

    plan, u, v, _, gap = emd_with_duals(a, b, cost)
    real = plan[:, : len(dst)]
    rho = np.zeros(grid.size)
    rho[src] = real.sum(axis=1) / vol
    rho = rho.reshape(grid.shape)

    # ψ on spt(g) from the real columns; the tilt lives on the source side only
    duals = canonical_duals(GridDensity.clipped(grid, rho), g, v[: len(dst)], gap)
    i, j = np.nonzero(real > 0)
    tp = TransportPlan(grid, grid, src[i], dst[j], real[i, j], float((real * base).sum()))
    diag = {
        "method": "lp",
        "duality_gap": gap,
        "cost": tp.cost,
        "w2": tp.w2,
        "iterations": 0,
        "dummy_dual": float(v[-1]) if dummy else float("nan"),
        "tilt": tilt,
    }
    return finish(rho, g, f, duals, diag, tp)

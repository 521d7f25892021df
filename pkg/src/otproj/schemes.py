"""Time-discrete evolutions built from projections and proximal steps.

Three schemes are provided:

* set growth, ``ρ_{k+1} = P_{K₁}[(1 + τ) ρ_k]`` on indicators of sets;
* crowd motion, transport by ``id + τ v``, an optional implicit heat step, then
  projection onto ``{ρ <= 1}``;
* porous-medium type flows, ``ρ_{k+1} = argmin (1/2τ) W2²(ρ, ρ_k) + ∫ h(ρ)``.

Each returns a :class:`SchemeTrace` with one record per step.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np
from scipy.sparse import diags, identity, kron
from scipy.sparse.linalg import cg

from . import io
from .discrete import DEFAULT_CAP, solve_ot_lp
from .errors import Infeasible, InstanceTooLarge, SolverFailure
from .grid import ConstraintField, GridDensity, mass, pushforward, total_variation
from .ot1d import w2_1d
from .projection import integrands
from .projection.entropic import project_entropic
from .projection.integrands import ConvexIntegrand
from .projection.interval import project_k1_1d
from .projection.jko import jko_step
from .projection.lp import project_lp

KINDS = ("set_growth", "crowd", "porous")
SOLVERS = ("auto", "k1", "lp", "entropic")
MAX_2D_CELLS = 64 * 64
W2_2D_MAX_CELLS = 1024
SPLITTING_ORDER = "transport, diffusion, projection"


@dataclass
class SchemeConfig:
    """Parameters of a time-discrete evolution.

    Attributes:
        tau: time step.
        t_final: final time; the run has ``floor(t_final / tau)`` steps.
        kind: one of ``set_growth``, ``crowd``, ``porous``.
        velocity: crowd velocity. ``None`` or ``"zero"``, a dict
            ``{"name": "constant", "value": [...]}`` or
            ``{"name": "toward", "point": [...], "speed": s}``, an array of
            per-cell vectors, or a callable on cell centres.
        sigma: diffusion coefficient of the crowd heat step.
        integrand: energy density for ``porous``; a ConvexIntegrand or a name
            such as ``"porous:2"``, ``"entropy"``, ``"quadratic"``.
        solver: ``auto``, ``k1``, ``lp`` or ``entropic``.
        eps: entropic parameter when the entropic solver is used.
        tol: marginal tolerance of iterative solvers.
        max_iter: iteration cap of iterative solvers.
        stride: keep a density snapshot every ``stride`` steps.
    """

    tau: float
    t_final: float
    kind: str = "porous"
    velocity: Any = None
    sigma: float = 0.0
    integrand: Union[str, ConvexIntegrand, None] = None
    solver: str = "auto"
    eps: Optional[float] = None
    tol: float = 1e-9
    max_iter: int = 20000
    stride: int = 1

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError("tau must be positive")
        if self.steps < 1:
            raise ValueError("t_final must allow at least one step")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if int(self.stride) < 1:
            raise ValueError("stride must be a positive integer")

    @property
    def steps(self) -> int:
        # guard against 0.3 / 0.1 = 2.9999999999999996
        return int(math.floor(self.t_final / self.tau * (1 + 1e-12)))

    def energy(self) -> ConvexIntegrand:
        return parse_integrand(self.integrand)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if isinstance(self.integrand, ConvexIntegrand):
            out["integrand"] = self.integrand.name
        v = self.velocity
        if callable(v):
            out["velocity"] = getattr(v, "__name__", "callable")
        elif isinstance(v, np.ndarray):
            out["velocity"] = "per-cell array"
        return out


def parse_integrand(spec) -> ConvexIntegrand:
    """ConvexIntegrand from a name: ``zero``, ``quadratic``, ``entropy``, ``porous:m``, ``indicator:c``, ``penalty:m``."""
    if isinstance(spec, ConvexIntegrand):
        return spec
    if spec is None:
        raise ValueError("the porous scheme needs an integrand")
    name, _, arg = str(spec).partition(":")
    simple = {"zero": integrands.zero, "quadratic": integrands.quadratic, "entropy": integrands.entropy}
    if name in simple and not arg:
        return simple[name]()
    if name == "porous" and arg:
        return integrands.porous(float(arg))
    if name == "indicator":
        return integrands.indicator(float(arg) if arg else 1.0)
    if name == "penalty" and arg:
        return integrands.penalty(int(arg))
    raise ValueError(f"unknown integrand {spec!r}")


def velocity_field(spec, grid) -> np.ndarray:
    """Per-cell velocity vectors of shape ``(size, dim)``."""
    pts = grid.points()
    if spec is None or (isinstance(spec, str) and spec == "zero"):
        return np.zeros_like(pts)
    if callable(spec):
        return np.asarray(spec(pts), dtype=float).reshape(grid.size, grid.dim)
    if isinstance(spec, dict):
        name = spec.get("name")
        if name == "zero":
            return np.zeros_like(pts)
        if name == "constant":
            a = np.broadcast_to(np.asarray(spec["value"], dtype=float), (grid.dim,))
            return np.tile(a, (grid.size, 1))
        if name == "toward":
            d = np.asarray(spec["point"], dtype=float)[None, :] - pts
            r = np.linalg.norm(d, axis=1, keepdims=True)
            return float(spec.get("speed", 1.0)) * np.where(r > 0, d / np.where(r > 0, r, 1.0), 0.0)
        raise ValueError(f"unknown velocity field {name!r}")
    return np.asarray(spec, dtype=float).reshape(grid.size, grid.dim)


@dataclass
class SchemeTrace:
    """Per-step records and density snapshots of one run."""

    config: SchemeConfig
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    truncated: bool = False
    reason: str = ""
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.records], dtype=float)

    @property
    def final(self) -> GridDensity:
        return self.snapshots[-1][1]

    def to_csv(self) -> str:
        keys = list(self.records[0].keys()) if self.records else []
        for r in self.records:
            keys += [k for k in r if k not in keys]
        buf = _io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: _fmt(r.get(k)) for k in keys})
        return buf.getvalue()

    def export(self, directory) -> Path:
        """Write ``trace.csv``, numbered snapshot files and ``manifest.json``."""
        out = Path(directory)
        io.atomic_write_text(out / "trace.csv", self.to_csv())
        files = []
        for step, rho in self.snapshots:
            name = f"snapshots/rho_{step:05d}.json"
            io.write_density(out / name, rho)
            files.append({"step": step, "path": name})
        manifest = {
            "config": self.config.to_dict(),
            "steps": len(self.records) - 1,
            "truncated": self.truncated,
            "reason": self.reason,
            "metadata": self.metadata,
            "trace": "trace.csv",
            "snapshots": files,
        }
        return io.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, default=_jsonable))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _record(step: int, time: float, rho: GridDensity, w2: float, cap: Optional[float] = None, **extra) -> dict:
    v = rho.values
    rec = {
        "step": step,
        "time": time,
        "mass": mass(rho),
        "tv": total_variation(rho),
        "w2_step": w2,
        "min": float(v.min()),
        "max": float(v.max()),
        "violation": float(max(0.0, v.max() - cap)) if cap is not None else 0.0,
    }
    rec.update(extra)
    return rec


def w2_step(a: GridDensity, b: GridDensity) -> float:
    """W2 between consecutive iterates: exact in 1D, LP for small 2D grids, else NaN."""
    ma, mb = mass(a), mass(b)
    if ma <= 0 or mb <= 0:
        return float("nan")
    if abs(ma - mb) > 1e-9 * max(ma, mb):
        b = b.with_values(b.values * (ma / mb))
    if a.grid.dim == 1:
        return w2_1d(a, b)
    if a.grid.size <= W2_2D_MAX_CELLS:
        return solve_ot_lp(a, b)[0].w2
    return float("nan")


def project_unit(g: GridDensity, solver: str, cfg: SchemeConfig, model: str = "continuum"):
    """Projection onto ``{ρ <= 1}`` with the configured solver."""
    f = ConstraintField.constant(g.grid, 1.0)
    if solver == "auto":
        solver = "k1" if g.grid.dim == 1 else "lp"
    if solver == "k1":
        if g.grid.dim != 1:
            raise ValueError("the k1 solver is one-dimensional")
        return project_k1_1d(g, 1.0, model=model)
    if solver == "lp":
        if g.grid.dim == 2 and g.grid.size > MAX_2D_CELLS:
            raise InstanceTooLarge(f"LP projections are limited to {MAX_2D_CELLS} cells in 2D")
        return project_lp(g, f, cap=DEFAULT_CAP)
    return project_entropic(g, f, eps=cfg.eps, max_iter=cfg.max_iter, tol=cfg.tol)


def indicator_defect(rho: GridDensity, lo: float = 0.05, hi: float = 0.95) -> tuple:
    """Intermediate cells away from the set boundary, and the boundary cell count.

    A cell is on the boundary when its neighbourhood (itself and its axis
    neighbours) contains both a cell above ½ and a cell below ½. Cells with
    values in ``(lo, hi)`` are admissible only there.
    """
    v = rho.values
    inside = v >= 0.5
    p = np.pad(inside, 1, mode="constant", constant_values=False)
    any_in = inside.copy()
    any_out = ~inside
    for k in range(v.ndim):
        for s in (-1, 1):
            nb = np.roll(p, s, axis=k)[tuple(slice(1, -1) for _ in range(v.ndim))]
            any_in |= nb
            any_out |= ~nb
    boundary = any_in & any_out
    mid = (v > lo) & (v < hi)
    return int((mid & ~boundary).sum()), int(boundary.sum())


def _progress(callback, cancel, step, rec):
    if callback is not None:
        callback(step, rec)
    if cancel is not None and cancel.is_set():
        from .errors import Cancelled

        raise Cancelled(f"run cancelled after step {step}")


def evolve_set_growth(rho0: GridDensity, cfg: SchemeConfig, callback: Optional[Callable] = None, cancel=None) -> SchemeTrace:
    """Exponential growth of a set under the unit cap, ``ρ_{k+1} = P_{K₁}[(1 + τ) ρ_k]``.

    Every iterate is checked to be an indicator (see :func:`indicator_defect`)
    and every projection against ``TV(ρ_{k+1}) <= TV((1 + τ) ρ_k)``. A run whose
    mass outgrows the box stops early with ``truncated`` set.
    """
    v = rho0.values
    if np.any(np.minimum(np.abs(v), np.abs(v - 1.0)) > 1e-9):
        raise ValueError("the initial density must be an indicator (values in {0, 1})")
    box = rho0.grid.size * rho0.grid.cell_volume
    if mass(rho0) >= box:
        raise Infeasible("the initial set fills the box")
    trace = SchemeTrace(cfg, metadata={"scheme": "set_growth"})
    rho = rho0
    defect, bcount = indicator_defect(rho)
    trace.records.append(
        _record(0, 0.0, rho, 0.0, 1.0, indicator_defect=defect, boundary_cells=bcount, tv_before=total_variation(rho), tv_bound_ok=True)
    )
    trace.snapshots.append((0, rho))
    for k in range(1, cfg.steps + 1):
        g = rho.with_values(rho.values * (1 + cfg.tau))
        if mass(g) > box * (1 - 1e-12):
            trace.truncated, trace.reason = True, f"mass {mass(g):.6g} exceeds the box capacity at step {k}"
            break
        res = project_unit(g, cfg.solver, cfg)
        new = res.density
        defect, bcount = indicator_defect(new)
        tv_g = total_variation(g)
        rec = _record(
            k,
            k * cfg.tau,
            new,
            res.diagnostics.get("w2", float("nan")),
            1.0,
            indicator_defect=defect,
            boundary_cells=bcount,
            tv_before=tv_g,
            tv_bound_ok=bool(total_variation(new) <= tv_g * (1 + 1e-9) + 1e-9),
        )
        trace.records.append(rec)
        rho = new
        if k % cfg.stride == 0 or k == cfg.steps:
            trace.snapshots.append((k, rho))
        _progress(callback, cancel, k, rec)
    if trace.snapshots[-1][0] != len(trace.records) - 1:
        trace.snapshots.append((len(trace.records) - 1, rho))
    return trace


def heat_matrix(grid, coef: float):
    """``I - coef * Δ_h`` with the five-point (three-point in 1D) stencil and no-flux walls."""
    mats = []
    for n in grid.shape:
        main = np.full(n, -2.0)
        main[0] = main[-1] = -1.0
        mats.append(diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1]) / grid.spacing**2)
    if grid.dim == 1:
        lap = mats[0]
    else:
        lap = kron(mats[0], identity(grid.shape[1])) + kron(identity(grid.shape[0]), mats[1])
    return (identity(grid.size) - coef * lap).tocsr()


def heat_step(rho: GridDensity, coef: float, rtol: float = 1e-10) -> GridDensity:
    """Implicit Euler heat step solved by conjugate gradients."""
    a = heat_matrix(rho.grid, coef)
    b = rho.values.ravel()
    x, info = cg(a, b, x0=b.copy(), rtol=rtol, atol=0.0, maxiter=10 * rho.grid.size)
    if info != 0:
        raise SolverFailure(f"conjugate gradients stopped with code {info}")
    res = float(np.linalg.norm(a @ x - b) / max(np.linalg.norm(b), 1e-300))
    if res > rtol * 10:
        raise SolverFailure(f"heat step residual {res:.3g} above {rtol:g}")
    return GridDensity.clipped(rho.grid, x.reshape(rho.grid.shape))


def evolve_crowd(rho0: GridDensity, cfg: SchemeConfig, callback: Optional[Callable] = None, cancel=None) -> SchemeTrace:
    """Crowd motion under the unit density cap.

    Each step moves mass by ``id + τ v``, runs one implicit heat step of
    coefficient ``σ`` when ``σ > 0``, and projects onto ``{ρ <= 1}``. The TV
    before and after the projection is recorded.
    """
    if np.any(rho0.values > 1 + 1e-9):
        raise ValueError("the initial density must satisfy ρ <= 1")
    grid = rho0.grid
    vel = velocity_field(cfg.velocity, grid)
    targets = grid.points() + cfg.tau * vel
    trace = SchemeTrace(cfg, metadata={"scheme": "crowd", "splitting": SPLITTING_ORDER})
    rho = rho0
    trace.records.append(_record(0, 0.0, rho, 0.0, 1.0, tv_before=total_variation(rho)))
    trace.snapshots.append((0, rho))
    moving = bool(np.any(vel != 0))
    for k in range(1, cfg.steps + 1):
        tilde = pushforward(rho, targets) if moving else rho
        if cfg.sigma > 0:
            tilde = heat_step(tilde, cfg.sigma * cfg.tau)
        tv_before = total_variation(tilde)
        if np.all(tilde.values <= 1.0):
            new = tilde
        else:
            new = project_unit(tilde, cfg.solver, cfg).density
        rec = _record(k, k * cfg.tau, new, w2_step(rho, new), 1.0, tv_before=tv_before)
        trace.records.append(rec)
        rho = new
        if k % cfg.stride == 0 or k == cfg.steps:
            trace.snapshots.append((k, rho))
        _progress(callback, cancel, k, rec)
    return trace


def evolve_porous_medium(rho0: GridDensity, cfg: SchemeConfig, callback: Optional[Callable] = None, cancel=None) -> SchemeTrace:
    """Minimising-movement flow of ``∫ h(ρ)``: one :func:`jko_step` per time step.

    ``solver="auto"`` uses the exact quantile method in 1D and the entropic
    method in 2D.
    """
    h = cfg.energy()
    method = cfg.solver
    if method == "auto":
        method = "lp" if rho0.grid.dim == 1 else "entropic"
    if method not in ("lp", "entropic"):
        raise ValueError("the porous scheme runs with the lp or entropic method")
    trace = SchemeTrace(cfg, metadata={"scheme": "porous", "integrand": h.name, "method": method})
    rho = rho0
    trace.records.append(_record(0, 0.0, rho, 0.0))
    trace.snapshots.append((0, rho))
    for k in range(1, cfg.steps + 1):
        new = jko_step(rho, h, cfg.tau, method=method, eps=cfg.eps, max_iter=cfg.max_iter, tol=cfg.tol)
        rec = _record(k, k * cfg.tau, new, w2_step(rho, new))
        trace.records.append(rec)
        rho = new
        if k % cfg.stride == 0 or k == cfg.steps:
            trace.snapshots.append((k, rho))
        _progress(callback, cancel, k, rec)
    return trace


def evolve(rho0: GridDensity, cfg: SchemeConfig, callback: Optional[Callable] = None, cancel=None) -> SchemeTrace:
    """Dispatch on ``cfg.kind``."""
    run = {"set_growth": evolve_set_growth, "crowd": evolve_crowd, "porous": evolve_porous_medium}[cfg.kind]
    return run(rho0, cfg, callback=callback, cancel=cancel)

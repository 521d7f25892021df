"""Regular 1D/2D grids, cell-averaged densities and basic functionals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DensityFormatError, TargetOutsideDomain


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid.

    Attributes:
        dim: 1 or 2.
        shape: number of cells per axis.
        origin: coordinate of the centre of the first cell, per axis.
        spacing: cell width, identical on every axis.
    """

    dim: int
    shape: tuple
    origin: tuple
    spacing: float

    def __post_init__(self):
        shape = tuple(int(s) for s in np.atleast_1d(self.shape))
        origin = tuple(float(o) for o in np.atleast_1d(self.origin))
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if len(shape) != self.dim or len(origin) != self.dim:
            raise ValueError("shape and origin must have one entry per axis")
        if min(shape) < 2:
            raise ValueError("need at least two cells per axis")
        if not (self.spacing > 0 and np.isfinite(self.spacing)):
            raise ValueError("spacing must be positive")

    @classmethod
    def from_bounds(cls, lower, upper, cells) -> "Grid":
        """Grid whose box is ``[lower, upper]`` per axis with ``cells`` cells per axis.

        The spacing must agree on all axes.
        """
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        cells = np.broadcast_to(np.atleast_1d(cells), lower.shape).astype(int)
        widths = (upper - lower) / cells
        if not np.allclose(widths, widths[0], rtol=1e-12, atol=0.0):
            raise ValueError("cells must be square")
        h = float(widths[0])
        return cls(len(lower), tuple(cells), tuple(lower + h / 2), h)

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin) - self.spacing / 2

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(self.shape) - 0.5) * self.spacing

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def axis(self, k: int = 0) -> np.ndarray:
        """Cell centres along axis ``k``."""
        return self.origin[k] + self.spacing * np.arange(self.shape[k])

    def edges(self, k: int = 0) -> np.ndarray:
        return self.lower[k] + self.spacing * np.arange(self.shape[k] + 1)

    def mesh(self) -> tuple:
        """Coordinate arrays of shape ``self.shape`` (ij indexing)."""
        return tuple(np.meshgrid(*[self.axis(k) for k in range(self.dim)], indexing="ij"))

    def points(self) -> np.ndarray:
        """Cell centres as an ``(size, dim)`` array in row-major order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def same_as(self, other: "Grid", rtol: float = 1e-12) -> bool:
        return (
            self.dim == other.dim
            and self.shape == other.shape
            and np.allclose(self.origin, other.origin, rtol=0, atol=rtol * self.spacing)
            and abs(self.spacing - other.spacing) <= rtol * self.spacing
        )


def _as_values(grid: Grid, values, allow_negative: bool) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.size != grid.size:
        raise DensityFormatError(f"expected {grid.size} values, got {arr.size}")
    arr = arr.reshape(grid.shape)
    if not np.all(np.isfinite(arr)):
        raise DensityFormatError("values must be finite")
    if not allow_negative and np.any(arr < 0):
        raise DensityFormatError("values must be nonnegative")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Nonnegative cell averages on a grid (mass per unit volume)."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _as_values(self.grid, self.values, False))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, subsamples: int = 1) -> "GridDensity":
        """Cell averages of ``fn`` by a tensor midpoint rule with ``subsamples`` points per axis."""
        h = grid.spacing
        offs = (np.arange(subsamples) + 0.5) / subsamples * h - h / 2
        acc = np.zeros(grid.shape)
        for shift in np.array(np.meshgrid(*([offs] * grid.dim), indexing="ij")).reshape(grid.dim, -1).T:
            coords = [m + s for m, s in zip(grid.mesh(), shift)]
            acc += np.asarray(fn(*coords), dtype=float)
        return cls(grid, np.maximum(acc / subsamples**grid.dim, 0.0))

    @classmethod
    def clipped(cls, grid: Grid, values) -> "GridDensity":
        """Build from solver output, zeroing round-off negatives."""
        return cls(grid, np.maximum(np.asarray(values, dtype=float), 0.0))

    def with_values(self, values) -> "GridDensity":
        return type(self)(self.grid, values)

    def mass(self) -> float:
        return mass(self)

    def normalized(self, target: float = 1.0) -> "GridDensity":
        return rescale_mass(self, target / mass(self))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass(frozen=True, eq=False)
class ConstraintField:
    """Upper bound ``f`` on a grid; total mass may exceed one."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _as_values(self.grid, self.values, False))

    @classmethod
    def constant(cls, grid: Grid, cap: float) -> "ConstraintField":
        return cls(grid, np.full(grid.shape, float(cap)))

    def capacity(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def is_constant(self, rtol: float = 1e-12) -> bool:
        v = self.values
        return bool(np.all(np.abs(v - v.flat[0]) <= rtol * max(abs(v.flat[0]), 1e-300)))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


def total_variation(rho, boundary: str | None = None) -> float:
    """Discrete total variation with forward differences.

    Densities are extended by zero outside the box, so jumps at the box
    boundary count. Constraint fields are extended by replication
    (``boundary="replicate"``), since a cap has no natural zero extension.
    """
    if boundary is None:
        boundary = "replicate" if isinstance(rho, ConstraintField) else "zero"
    v = np.asarray(rho.values, dtype=float)
    h = rho.grid.spacing
    mode = {"zero": "constant", "replicate": "edge"}[boundary]
    p = np.pad(v, 1, mode=mode)
    if v.ndim == 1:
        return float(np.abs(np.diff(p)).sum())
    dx = p[1:, :-1] - p[:-1, :-1]
    dy = p[:-1, 1:] - p[:-1, :-1]
    return float(h * np.sqrt(dx * dx + dy * dy).sum())


def mass(rho) -> float:
    return float(np.asarray(rho.values).sum() * rho.grid.cell_volume)


def second_moment(rho) -> float:
    r2 = sum(m * m for m in rho.grid.mesh())
    return float((r2 * rho.values).sum() * rho.grid.cell_volume)


def rescale_mass(rho: GridDensity, factor: float) -> GridDensity:
    if not factor > 0:
        raise ValueError("factor must be positive")
    return rho.with_values(rho.values * factor)


def l1_distance(a, b) -> float:
    return float(np.abs(np.asarray(a.values) - np.asarray(b.values)).sum() * a.grid.cell_volume)


def pushforward(rho: GridDensity, targets) -> GridDensity:
    """Image of ``rho`` under a per-cell map by linear (1D) or bilinear (2D) splatting.

    ``targets`` holds the image of every cell centre, with shape ``grid.shape``
    in 1D or ``grid.shape + (2,)`` in 2D. Images up to one cell outside the box
    are clamped onto the boundary cells.
    """
    grid = rho.grid
    t = np.asarray(targets, dtype=float).reshape(grid.size, grid.dim)
    m = rho.values.ravel() * grid.cell_volume
    live = m > 0
    s = (t[live] - np.asarray(grid.origin)) / grid.spacing
    if not np.all(np.isfinite(s)):
        raise TargetOutsideDomain("non-finite target coordinates")
    hi = np.asarray(grid.shape) - 1
    if np.any(s < -1.5) or np.any(s > hi + 1.5):
        raise TargetOutsideDomain("map sends mass more than one cell outside the box")
    s = np.clip(s, 0, hi)
    base = np.minimum(np.floor(s).astype(int), np.maximum(hi - 1, 0))
    frac = s - base
    out = np.zeros(grid.shape)
    mm = m[live]
    if grid.dim == 1:
        np.add.at(out, base[:, 0], mm * (1 - frac[:, 0]))
        np.add.at(out, base[:, 0] + 1, mm * frac[:, 0])
    else:
        for di in (0, 1):
            wi = frac[:, 0] if di else 1 - frac[:, 0]
            for dj in (0, 1):
                wj = frac[:, 1] if dj else 1 - frac[:, 1]
                np.add.at(out, (base[:, 0] + di, base[:, 1] + dj), mm * wi * wj)
    return GridDensity.clipped(grid, out / grid.cell_volume)

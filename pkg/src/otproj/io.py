"""File formats: density JSON documents, plan triplets and atomic writes."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DensityFormatError
from .grid import ConstraintField, Grid, GridDensity

_KEYS = {"dim", "shape", "origin", "spacing", "values"}


def atomic_write_text(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _doc(g: Grid, values) -> dict:
    return {
        "dim": g.dim,
        "shape": list(g.shape),
        "origin": list(g.origin),
        "spacing": g.spacing,
        "values": [float(v) for v in np.asarray(values).ravel()],
    }


def density_to_dict(rho) -> dict:
    return _doc(rho.grid, rho.values)


def density_to_json(rho) -> str:
    # repr-based float formatting in json round-trips doubles exactly
    return json.dumps(density_to_dict(rho))


def _parse(doc: dict) -> tuple:
    if not isinstance(doc, dict) or set(doc) != _KEYS:
        raise DensityFormatError(f"density document must have exactly the keys {sorted(_KEYS)}")
    try:
        grid = Grid(int(doc["dim"]), tuple(doc["shape"]), tuple(doc["origin"]), float(doc["spacing"]))
    except (TypeError, ValueError) as exc:
        raise DensityFormatError(str(exc)) from exc
    values = np.asarray(doc["values"], dtype=float)
    if values.ndim != 1:
        raise DensityFormatError("values must be a flat list")
    if np.any(np.isnan(values)):
        raise DensityFormatError("values contain NaN")
    return grid, values


def density_from_dict(doc: dict, kind=GridDensity):
    grid, values = _parse(doc)
    if np.any(values < 0):
        raise DensityFormatError("values contain negative entries")
    return kind(grid, values)


def read_density(path, kind=GridDensity):
    with open(path) as fh:
        doc = json.load(fh, parse_constant=lambda c: math.nan)
    return density_from_dict(doc, kind)


def read_constraint(path) -> ConstraintField:
    return read_density(path, ConstraintField)


def write_density(path, rho) -> Path:
    return atomic_write_text(path, density_to_json(rho))


def write_potential(path, grid: Grid, values) -> Path:
    """Potentials share the density layout but may be negative."""
    return atomic_write_text(path, json.dumps(_doc(grid, values)))


def read_potential(path) -> tuple:
    with open(path) as fh:
        doc = json.load(fh, parse_constant=lambda c: math.nan)
    grid, values = _parse(doc)
    return grid, values.reshape(grid.shape)


def plan_to_csv(rows, cols, weights) -> str:
    lines = ["source,target,weight"]
    lines += [f"{int(i)},{int(j)},{float(w)!r}" for i, j, w in zip(rows, cols, weights)]
    return "\n".join(lines) + "\n"

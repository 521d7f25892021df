"""Command-line entry point.

``otproj run --config CFG.json [--out DIR] [--jobs N] [--seed U64]`` executes
one pipeline described by a JSON config and writes a manifest next to its
outputs. ``otproj plot PATH --out DIR`` turns a trace or a report array into
plot-ready CSV, a column schema and an optional SVG chart.

Exit codes: 0 success, 1 a verification check failed, 2 configuration error,
3 solver failure. Errors are also printed to standard error as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
import time
import zlib
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diagnostics, io
from .discrete import sinkhorn, solve_ot_lp
from .errors import DensityFormatError, OTProjError
from .grid import ConstraintField, GridDensity, mass
from .ot1d import potentials_1d, w2_1d
from .projection.entropic import project_entropic, project_penalized
from .projection.interval import project_k1_1d
from .projection.jko import jko_step, optimality_residual
from .projection.lp import project_lp
from .schemes import SchemeConfig, SchemeTrace, evolve, parse_integrand

SCHEMA_VERSION = 1
COMMANDS = ("ot", "project", "jko", "evolve", "verify")
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

_TOP_KEYS = {"schema", "command", "inputs", "constraint", "solver", "scheme", "jko", "checks", "output", "seed"}
_INPUTS = {"ot": {"rho", "g"}, "project": {"g"}, "jko": {"rho"}, "evolve": {"rho0"}, "verify": set()}
_SOLVER_KEYS = {"name", "eps", "tol", "max_iter", "m", "model"}
_SOLVERS = {
    "ot": ("auto", "exact1d", "lp", "sinkhorn"),
    "project": ("auto", "lp", "k1", "entropic", "penalized"),
    "jko": ("auto", "lp", "entropic"),
}
_JKO_KEYS = {"integrand", "tau"}
_CHECK_KEYS = {"name", "count"}
CHECK_FAMILIES = ("canonical", "bv_1d", "bv_2d", "bv_general_1d", "saturation_1d", "main_inequality", "holder", "gamma")

TRACE_COLUMNS = {
    "step": "step index k",
    "time": "k * tau",
    "mass": "total mass of the iterate",
    "tv": "total variation of the iterate",
    "w2_step": "W2 distance to the previous iterate (NaN when not computed)",
    "min": "minimum cell value",
    "max": "maximum cell value",
    "violation": "amount by which the iterate exceeds the unit cap",
    "tv_before": "total variation of the input of the projection step",
    "tv_bound_ok": "projection did not increase TV beyond slack",
    "indicator_defect": "intermediate cells away from the set boundary",
    "boundary_cells": "cells on the set boundary",
}
REPORT_COLUMNS = {
    "check": "check name",
    "bound": "bound compared against",
    "slack": "signed margin, positive when the bound holds",
    "tolerance": "pass threshold on -slack",
    "passed": "pass flag",
}


class ConfigError(Exception):
    """Invalid configuration; ``path`` names the offending file if any."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


# configuration ------------------------------------------------------------


def _require_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {extra}")


def _seed(value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise ConfigError("seed must be an unsigned 64-bit integer")
    try:
        s = int(value)
    except ValueError as exc:
        raise ConfigError("seed must be an unsigned 64-bit integer") from exc
    if not 0 <= s < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return s


def load_config(path, out: Optional[str] = None, seed=None) -> dict:
    """Parse and validate a run config; command-line overrides win."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", str(path)) from exc
    _require_keys(doc, _TOP_KEYS, "config")
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"config schema must be {SCHEMA_VERSION}")
    cmd = doc.get("command")
    if cmd not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}")
    cfg = dict(doc)
    base = path.parent
    inputs = doc.get("inputs", {})
    _require_keys(inputs, _INPUTS[cmd], "inputs")
    missing = sorted(_INPUTS[cmd] - set(inputs))
    if missing:
        raise ConfigError(f"missing inputs for {cmd}: {missing}")
    resolved = {}
    for key, p in inputs.items():
        full = (base / p) if not Path(p).is_absolute() else Path(p)
        if not full.is_file():
            raise ConfigError(f"input file not found: {full}", str(full))
        resolved[key] = str(full)
    cfg["inputs"] = resolved

    if cmd == "project":
        c = doc.get("constraint", 1.0)
        if isinstance(c, str):
            full = (base / c) if not Path(c).is_absolute() else Path(c)
            if not full.is_file():
                raise ConfigError(f"constraint file not found: {full}", str(full))
            cfg["constraint"] = str(full)
        elif isinstance(c, (int, float)) and not isinstance(c, bool) and c > 0:
            cfg["constraint"] = float(c)
        else:
            raise ConfigError("constraint must be a path or a positive number")
    elif "constraint" in doc:
        raise ConfigError(f"constraint is not used by {cmd}")

    if cmd in _SOLVERS:
        solver = dict(doc.get("solver", {}))
        _require_keys(solver, _SOLVER_KEYS, "solver")
        solver.setdefault("name", "auto")
        if solver["name"] not in _SOLVERS[cmd]:
            raise ConfigError(f"solver for {cmd} must be one of {_SOLVERS[cmd]}")
        cfg["solver"] = solver
    elif "solver" in doc:
        raise ConfigError(f"solver is not used by {cmd}")

    if cmd == "jko":
        jko = doc.get("jko")
        _require_keys(jko, _JKO_KEYS, "jko")
        if not {"integrand", "tau"} <= set(jko):
            raise ConfigError("jko needs integrand and tau")
        try:
            parse_integrand(jko["integrand"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    elif "jko" in doc:
        raise ConfigError(f"jko is not used by {cmd}")

    if cmd == "evolve":
        scheme = doc.get("scheme")
        if not isinstance(scheme, dict):
            raise ConfigError("evolve needs a scheme object")
        try:
            sc = SchemeConfig(**scheme)
            if sc.kind == "porous":
                sc.energy()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scheme: {exc}") from exc
    elif "scheme" in doc:
        raise ConfigError(f"scheme is not used by {cmd}")

    if cmd == "verify":
        checks = doc.get("checks", [{"name": "canonical"}])
        if not isinstance(checks, list) or not checks:
            raise ConfigError("checks must be a nonempty list")
        for c in checks:
            _require_keys(c, _CHECK_KEYS, "check")
            if c.get("name") not in CHECK_FAMILIES:
                raise ConfigError(f"check name must be one of {CHECK_FAMILIES}")
            if "count" in c and (not isinstance(c["count"], int) or c["count"] < 1):
                raise ConfigError("check count must be a positive integer")
        cfg["checks"] = checks
    elif "checks" in doc:
        raise ConfigError(f"checks are not used by {cmd}")

    cfg["seed"] = _seed(seed if seed is not None else doc.get("seed", 0))
    cfg["output"] = str(out if out is not None else doc.get("output", "out"))
    if out is None and not Path(cfg["output"]).is_absolute():
        cfg["output"] = str(base / cfg["output"])
    return cfg


def instance_seed(seed: int, family: str, index: int) -> int:
    """Seed of instance ``index`` of ``family``; independent of evaluation order."""
    ss = np.random.SeedSequence([seed, zlib.crc32(family.encode()), index])
    return int(ss.generate_state(1, np.uint64)[0])


# outputs ------------------------------------------------------------------


class _Outputs:
    def __init__(self, root: Path):
        self.root = root
        self.files: list = []

    def text(self, name: str, text: str) -> Path:
        p = io.atomic_write_text(self.root / name, text)
        self.files.append(name)
        return p

    def json(self, name: str, doc) -> Path:
        return self.text(name, json.dumps(doc, indent=2, default=_jsonable))

    def density(self, name: str, rho) -> Path:
        p = io.write_density(self.root / name, rho)
        self.files.append(name)
        return p

    def potential(self, name: str, grid, values) -> Path:
        p = io.write_potential(self.root / name, grid, values)
        self.files.append(name)
        return p

    def adopt(self, sub: str) -> None:
        """Record every file under ``sub`` written by a helper."""
        for p in sorted((self.root / sub).rglob("*")):
            if p.is_file():
                self.files.append(str(p.relative_to(self.root)))


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _scalars(d: dict) -> dict:
    return {k: v for k, v in d.items() if np.isscalar(v) or v is None}


# pipelines ----------------------------------------------------------------


def _run_ot(cfg, out: _Outputs) -> tuple:
    rho = io.read_density(cfg["inputs"]["rho"])
    g = io.read_density(cfg["inputs"]["g"])
    s = cfg["solver"]
    name = s["name"]
    if name == "auto":
        name = "exact1d" if rho.grid.dim == 1 else "lp"
    if name == "exact1d":
        if rho.grid.dim != 1:
            raise ConfigError("exact1d needs 1D densities")
        pot = potentials_1d(rho, g)
        w2 = w2_1d(rho, g)
        diag = {"solver": name, "w2": w2, "cost": 0.5 * w2 * w2, "duality_gap": 0.0}
    else:
        if name == "lp":
            plan, pot = solve_ot_lp(rho, g)
        else:
            eps = s.get("eps", 1e-4 * rho.grid.diameter**2)
            plan, pot = sinkhorn(rho, g, eps, max_iter=s.get("max_iter", 20000), tol=s.get("tol", 1e-9))
        out.text("plan.csv", io.plan_to_csv(plan.rows, plan.cols, plan.weights))
        diag = {"solver": name, "w2": plan.w2, "cost": plan.cost, "duality_gap": pot.slack}
    out.potential("phi.json", rho.grid, pot.phi)
    out.potential("psi.json", g.grid, pot.psi)
    out.json("report.json", diag)
    return diag, True


def _constraint(cfg, grid) -> ConstraintField:
    c = cfg["constraint"]
    if isinstance(c, str):
        f = io.read_constraint(c)
        if not f.grid.same_as(grid):
            raise ConfigError("constraint grid differs from the density grid", c)
        return f
    return ConstraintField.constant(grid, c)


def _run_project(cfg, out: _Outputs) -> tuple:
    g = io.read_density(cfg["inputs"]["g"])
    f = _constraint(cfg, g.grid)
    s = cfg["solver"]
    name = s["name"]
    if name == "auto":
        name = "k1" if g.grid.dim == 1 and f.is_constant() else "lp"
    if name == "penalized":
        rho = project_penalized(g, f, s.get("m", 16), eps=s.get("eps"), max_iter=s.get("max_iter", 20000), tol=s.get("tol", 1e-9))
        out.density("rho_bar.json", rho)
        diag = {"solver": name, "m": s.get("m", 16), "mass": mass(rho)}
        out.json("report.json", diag)
        return diag, True
    if name == "k1":
        if g.grid.dim != 1 or not f.is_constant():
            raise ConfigError("k1 needs a 1D density and a constant constraint")
        res = project_k1_1d(g, float(f.values.flat[0]), model=s.get("model", "continuum"))
    elif name == "lp":
        res = project_lp(g, f)
    else:
        res = project_entropic(g, f, eps=s.get("eps"), max_iter=s.get("max_iter", 20000), tol=s.get("tol", 1e-9))
    out.density("rho_bar.json", res.density)
    if res.duals is not None:
        out.potential("phi.json", g.grid, res.duals.phi)
    sat = diagnostics.saturation_report(res, g, f)
    diag = dict(_scalars(res.summary()), solver=name, saturation=sat.to_dict())
    if "intervals" in res.diagnostics:
        diag["intervals"] = res.diagnostics["intervals"]
    out.json("report.json", diag)
    return diag, True


def _run_jko(cfg, out: _Outputs) -> tuple:
    rho = io.read_density(cfg["inputs"]["rho"])
    s = cfg["solver"]
    h = parse_integrand(cfg["jko"]["integrand"])
    tau = float(cfg["jko"]["tau"])
    method = s["name"]
    if method == "auto":
        method = "lp" if rho.grid.dim == 1 else "entropic"
    new = jko_step(rho, h, tau, method=method, eps=s.get("eps"), max_iter=s.get("max_iter", 20000), tol=s.get("tol", 1e-9))
    out.density("rho.json", new)
    diag = {"solver": method, "integrand": h.name, "tau": tau, "mass": mass(new)}
    if rho.grid.dim == 1:
        diag["optimality_residual"] = optimality_residual(new, rho, h, tau)
    out.json("report.json", diag)
    return diag, True


def _run_evolve(cfg, out: _Outputs) -> tuple:
    rho0 = io.read_density(cfg["inputs"]["rho0"])
    sc = SchemeConfig(**cfg["scheme"])
    trace = evolve(rho0, sc)
    trace.export(out.root / "trace")
    out.adopt("trace")
    for p in emit_plot_data(trace, out.root / "plot"):
        out.files.append(str(Path(p).relative_to(out.root)))
    diag = {"steps": len(trace.records) - 1, "truncated": trace.truncated, "reason": trace.reason}
    diag.update(_scalars(trace.metadata))
    return diag, True


def _family_checks(name: str, count: Optional[int], seed: int) -> dict:
    D = diagnostics
    if name == "canonical":
        return {
            "canonical/ball_radius": D.ball_radius_report,
            "canonical/one_interval": D.one_interval_report,
            "canonical/sharpness": D.sharpness_report,
        }
    if name == "gamma":

        def gamma():
            g, f = D.penalization_instance()
            return D.gamma_convergence_study(g, f, (4, 8, 16, 32))

        return {"gamma": gamma}
    default = {"bv_1d": 50, "bv_2d": 10, "bv_general_1d": 25, "saturation_1d": 50, "main_inequality": 25, "holder": 20}[name]
    out = {}
    for i in range(count or default):
        s = instance_seed(seed, name, i)
        out[f"{name}[{i:03d}]"] = _instance_check(name, s)
    return out


def _instance_check(name: str, s: int):
    D = diagnostics

    def unit_cap(g):
        return ConstraintField.constant(g.grid, 1.0)

    if name == "bv_1d":

        def run():
            g = D.random_density_1d(s)
            return D.bv_projection_report(g, unit_cap(g))

        return run
    if name == "bv_2d":

        def run():
            g = D.random_density_2d(s)
            return D.bv_projection_report(g, unit_cap(g))

        return run
    if name == "bv_general_1d":

        def run():
            g = D.random_density_1d(s)
            return D.bv_projection_report(g, D.random_constraint_1d(s, g.grid))

        return run
    if name == "saturation_1d":

        def run():
            g = D.random_density_1d(s)
            f = unit_cap(g)
            return D.saturation_report(project_lp(g, f), g, f)

        return run
    if name == "main_inequality":

        def run():
            a, b = D.random_smooth_pair_1d(s)
            return D.main_inequality_residual(a, b, tol=1e-4)

        return run
    g0_seed, g1_seed = s, (s + 1) % 2**64
    return lambda: D.holder_modulus_check(D.random_density_1d(g0_seed), D.random_density_1d(g1_seed))


def _run_verify(cfg, out: _Outputs, jobs: int = 1) -> tuple:
    checks = {}
    for c in cfg["checks"]:
        checks.update(_family_checks(c["name"], c.get("count"), cfg["seed"]))
    reports = diagnostics.run_suite(checks, jobs)
    out.text("reports.json", diagnostics.suite_json(reports))
    for p in emit_plot_data(reports, out.root / "plot", svg=False):
        out.files.append(str(Path(p).relative_to(out.root)))
    print(diagnostics.summary_table(reports))
    failed = [r.check for r in reports if not r.passed]
    return {"checks": len(reports), "failed": failed}, not failed


_PIPELINES = {"ot": _run_ot, "project": _run_project, "jko": _run_jko, "evolve": _run_evolve, "verify": _run_verify}


def run(config_path, out: Optional[str] = None, jobs: int = 1, seed=None) -> int:
    """Execute the pipeline of a config file and return the process exit code."""
    t0 = time.perf_counter()
    outputs = None
    cfg = None
    try:
        cfg = load_config(config_path, out, seed)
        root = Path(cfg["output"])
        root.mkdir(parents=True, exist_ok=True)
        outputs = _Outputs(root)
        t1 = time.perf_counter()
        fn = _PIPELINES[cfg["command"]]
        diag, ok = fn(cfg, outputs, jobs) if cfg["command"] == "verify" else fn(cfg, outputs)
        code = EXIT_OK if ok else EXIT_CHECK
        error = None
    except (ConfigError, DensityFormatError, OSError) as exc:
        code, diag, t1 = EXIT_CONFIG, {}, time.perf_counter()
        error = _error(exc)
    except (OTProjError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code, diag, t1 = EXIT_SOLVER, {}, time.perf_counter()
        error = _error(exc)
    if error is not None:
        print(json.dumps(error), file=sys.stderr)
    if outputs is not None:
        t2 = time.perf_counter()
        manifest = {
            "schema": SCHEMA_VERSION,
            "config": cfg,
            "exit_code": code,
            "error": error,
            "outputs": outputs.files + ["manifest.json"],
            "timings": {"setup_s": t1 - t0, "pipeline_s": t2 - t1},
            "diagnostics": diag,
        }
        outputs.json("manifest.json", manifest)
    return code


def _error(exc: BaseException) -> dict:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path:
        doc["path"] = str(path)
    return doc


# plot data ----------------------------------------------------------------


def _records(obj) -> tuple:
    if isinstance(obj, SchemeTrace):
        return obj.records, "trace"
    if obj and isinstance(obj[0], diagnostics.VerificationReport):
        return [{k: r.to_dict()[k] for k in REPORT_COLUMNS} for r in obj], "report"
    if obj and "check" in obj[0]:
        return [{k: r.get(k) for k in REPORT_COLUMNS} for r in obj], "report"
    return list(obj), "trace"


def emit_plot_data(obj, directory, svg: bool = True) -> list:
    """Write ``plot_data.csv``, ``plot_data.schema.json`` and optionally ``plot.svg``.

    ``obj`` is a SchemeTrace, a list of trace records, or a list of reports
    (objects or dicts). Trace CSVs always start with the documented columns,
    so an empty trace gives a header-only file.
    """
    records, kind = _records(obj)
    doc = TRACE_COLUMNS if kind == "trace" else REPORT_COLUMNS
    base = ["step", "time", "mass", "tv", "w2_step", "min", "max", "violation"] if kind == "trace" else list(REPORT_COLUMNS)
    keys = list(base)
    for r in records:
        keys += [k for k in r if k not in keys]
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    directory = Path(directory)
    paths = [io.atomic_write_text(directory / "plot_data.csv", buf.getvalue())]
    schema = {"kind": kind, "columns": [{"name": k, "description": doc.get(k, "")} for k in keys]}
    paths.append(io.atomic_write_text(directory / "plot_data.schema.json", json.dumps(schema, indent=2)))
    if svg and kind == "trace" and records:
        paths.append(_svg(records, directory / "plot.svg"))
    return [str(p) for p in paths]


def _svg(records, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    step = [float(r["step"]) for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, col in zip(axes, ("tv", "mass")):
        ax.plot(step, [float(r[col]) for r in records], marker=".")
        ax.set_xlabel("step")
        ax.set_ylabel(col)
    fig.tight_layout()
    buf = _io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    return io.atomic_write_text(path, buf.getvalue())


def read_trace_csv(path) -> list:
    """Records of a ``trace.csv`` with numeric fields parsed."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v in ("True", "False"):
                    rec[k] = v == "True"
                    continue
                try:
                    rec[k] = float(v) if v != "" else float("nan")
                except ValueError:
                    rec[k] = v
            out.append(rec)
    return out


# entry point --------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="otproj", description="Wasserstein projections under density caps.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="execute a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--seed")
    p_plot = sub.add_parser("plot", help="plot data from trace.csv or reports.json")
    p_plot.add_argument("path")
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--no-svg", action="store_true")
    args = parser.parse_args(argv)
    if args.cmd == "run":
        if args.jobs < 1:
            print(json.dumps({"error": "ConfigError", "message": "--jobs must be positive"}), file=sys.stderr)
            return EXIT_CONFIG
        return run(args.config, args.out, args.jobs, args.seed)
    path = Path(args.path)
    try:
        if path.suffix == ".json":
            obj = json.loads(path.read_text())
        else:
            obj = read_trace_csv(path)
        for p in emit_plot_data(obj, args.out, svg=not args.no_svg):
            print(p)
    except (OSError, ValueError) as exc:
        print(json.dumps(_error(exc)), file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

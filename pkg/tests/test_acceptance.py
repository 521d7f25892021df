"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import barenblatt_m2  # noqa: E402

from otproj import diagnostics as D  # noqa: E402
from otproj.discrete import sinkhorn  # noqa: E402
from otproj.grid import ConstraintField, Grid, GridDensity, l1_distance  # noqa: E402
from otproj.ot1d import w2_1d  # noqa: E402
from otproj.projection import project_k1_1d, project_lp  # noqa: E402
from otproj.schemes import SchemeConfig, evolve  # noqa: E402

LINES = []
LP_GAPS = []
_CACHE = {}


def report(number, title, ok, detail, elapsed, limit=None):
    timed = limit is None or elapsed < limit
    status = "PASS" if ok and timed else "FAIL"
    budget = f" (limit {limit:.0f}s)" if limit is not None else ""
    line = f"criterion {number:>2} {status}: {title}: {detail}; {elapsed:.1f}s{budget}"
    LINES.append(line)
    print(line)
    assert ok, line
    assert timed, line


def unit_cap(g):
    return ConstraintField.constant(g.grid, 1.0)


def _lp(g, f):
    res = project_lp(g, f)
    LP_GAPS.append(res.diagnostics["duality_gap"])
    return res


def bv_instances():
    """Reports of criteria 3 and 4, computed once and shared with criterion 6."""
    if "bv" not in _CACHE:
        t0 = time.perf_counter()
        one = []
        for s in range(50):
            g = D.random_density_1d(s)
            f = unit_cap(g)
            one.append((D.bv_projection_report(g, f, result=_lp(g, f)), g, f))
        two = []
        for s in range(10):
            g = D.random_density_2d(s)
            f = unit_cap(g)
            two.append((D.bv_projection_report(g, f, result=_lp(g, f)), g, f))
        t1 = time.perf_counter()
        general = []
        for s in range(25):
            g = D.random_density_1d(1000 + s)
            f = D.random_constraint_1d(1000 + s, g.grid)
            general.append((D.bv_projection_report(g, f, result=_lp(g, f)), g, f))
        t2 = time.perf_counter()
        _CACHE["bv"] = (one, two, general, t1 - t0, t2 - t1)
    return _CACHE["bv"]


def test_criterion_01_ball_radius():
    t0 = time.perf_counter()
    rep = D.ball_radius_report(64, 0.21, 0.5)
    LP_GAPS.append(rep.artifacts["result"].diagnostics["duality_gap"])
    dt = time.perf_counter() - t0
    m = rep.measured
    tol = rep.tolerances["radius_ratio"]
    ok = abs(m["ratio"] - 1.1) <= tol
    report(1, "ball radius ratio", ok, f"R_bar/R = {m['ratio']:.4f}, target 1.1 +- {tol:.4f}", dt, 60)


def test_criterion_02_sharpness():
    t0 = time.perf_counter()
    worst, details = 0.0, []
    ok = True
    for n in (4, 10, 25):
        rep = D.sharpness_report(n)
        m = rep.measured
        tv_rho_ok = abs(m["tv_projection"] - 2.0) <= 1e-12
        tv_g_ok = abs(m["tv_data"] - 2.0 / n) <= 1e-12
        err = abs(m["ratio"] - (2 - 2 / n))
        worst = max(worst, err)
        ok &= tv_rho_ok and tv_g_ok and err <= 1e-6
        details.append(f"n={n}: ratio {m['ratio']:.9f}")
    dt = time.perf_counter() - t0
    report(2, "sharpness family", ok, ", ".join(details) + f", max error {worst:.1e}", dt, 5)


def test_criterion_03_bv_constant_cap():
    one, two, _, dt, _ = bv_instances()
    bad1 = [r for r, _, _ in one if not r.passed]
    bad2 = []
    for r, _, _ in two:
        # 10% relative slack in 2D
        if r.measured["tv_projection"] > 1.1 * r.measured["tv_data"]:
            bad2.append(r)
    overfull = sum(float(g.values.max()) > 1 for _, g, _ in one + two)
    worst = max(r.measured["tv_projection"] / r.measured["tv_data"] for r, _, _ in one + two)
    detail = f"{len(bad1)}/50 1D and {len(bad2)}/10 2D violations, {overfull} overfull, max TV ratio {worst:.4f}"
    report(3, "TV bound, f = 1", not bad1 and not bad2, detail, dt, 600)


def test_criterion_04_bv_general_cap():
    _, _, general, _, dt = bv_instances()
    bad = [r for r, _, _ in general if not r.passed]
    slack = min(r.slack / r.bound for r, _, _ in general)
    detail = f"{len(bad)}/25 violations, min relative slack {slack:.4f}"
    report(4, "TV bound, piecewise-constant f", not bad, detail, dt, 300)


def test_criterion_05_main_inequality():
    t0 = time.perf_counter()
    quad, smooth = [], []
    for s in range(25):
        a, b = D.random_smooth_pair_1d(s)
        quad.append(D.main_inequality_residual(a, b, "quadratic", tol=1e-4).measured["value"])
        smooth.append(D.main_inequality_residual(a, b, "smoothed", eps=0.1, tol=1e-3).measured["value"])
    dt = time.perf_counter() - t0
    ok = min(quad) >= -1e-4 and min(smooth) >= -1e-3
    detail = f"min quadratic {min(quad):.3e} (>= -1e-4), min smoothed {min(smooth):.3e} (>= -1e-3)"
    report(5, "main inequality", ok, detail, dt, 120)


def test_criterion_06_saturation_band():
    one, two, general, _, _ = bv_instances()
    t0 = time.perf_counter()
    fracs = []
    for r, g, f in one + two + general:
        rho = r.artifacts["result"].density
        fracs.append(D.band_fraction(rho.values, g.values, f.values))
    dt = time.perf_counter() - t0
    worst = max(fracs)
    detail = f"max mixed-band fraction {100 * worst:.2f}% over {len(fracs)} instances (limit 2%)"
    report(6, "saturation structure", worst <= D.BAND_FRACTION_MAX, detail, dt)


def test_criterion_07_gamma_convergence():
    t0 = time.perf_counter()
    g, f = D.penalization_instance()
    rep = D.gamma_convergence_study(g, f, (4, 8, 16, 32))
    dt = time.perf_counter() - t0
    l1 = rep.measured["l1"]
    ok = rep.measured["monotone"] and l1[-1] < 5e-2
    detail = "L1 " + ", ".join(f"m={m}: {v:.4f}" for m, v in zip(rep.measured["m"], l1))
    report(7, "penalised minimisers converge", ok, detail, dt, 300)


def test_criterion_08_holder():
    t0 = time.perf_counter()
    reps = [D.holder_modulus_check(D.random_density_1d(2 * s), D.random_density_1d(2 * s + 1)) for s in range(20)]
    dt = time.perf_counter() - t0
    bad = [r for r in reps if not r.passed]
    ratio = max(r.measured["lhs"] / r.measured["rhs"] for r in reps)
    detail = f"{len(bad)}/20 violations, max lhs/rhs {ratio:.4f}"
    report(8, "Hoelder modulus", not bad, detail, dt, 120)


def test_criterion_09_barenblatt():
    t0 = time.perf_counter()
    grid = Grid.from_bounds([-1.5], [1.5], [256])
    t_start, tau, t_final = 0.01, 1e-3, 0.1
    rho0 = GridDensity.from_function(grid, lambda x: barenblatt_m2(x, t_start), 8).normalized()
    trace = evolve(rho0, SchemeConfig(tau=tau, t_final=t_final, integrand="porous:2", solver="lp"))
    exact = GridDensity.from_function(grid, lambda x: barenblatt_m2(x, t_start + t_final), 8).normalized()
    err = l1_distance(trace.final, exact)
    tv = trace.column("tv")
    rise = float(np.max(np.diff(tv)))
    dt = time.perf_counter() - t0
    ok = err <= 0.05 and rise <= 1e-3 * tv[0] and len(trace.records) == 101
    detail = f"L1 error {err:.4f} (<= 0.05), max TV increase {rise:.2e} (<= {1e-3 * tv[0]:.2e})"
    report(9, "porous-medium Barenblatt", ok, detail, dt, 600)


def test_criterion_10_set_growth():
    t0 = time.perf_counter()
    grid = Grid.from_bounds([-2.0], [2.0], [256])
    h = grid.spacing
    x = grid.axis()
    cfg = SchemeConfig(tau=0.1, t_final=0.3, kind="set_growth")
    trace = evolve(GridDensity(grid, ((x > -0.5) & (x < 0.5)).astype(float)), cfg)
    err1 = 0.0
    ok = len(trace.snapshots) == 4
    for k, rho in trace.snapshots:
        inside = rho.values >= 0.5
        runs = np.count_nonzero(np.diff(inside.astype(int)) == 1) + int(inside[0])
        ok &= runs == 1 and trace.records[k]["indicator_defect"] == 0
        err1 = max(err1, abs(inside.sum() * h - 1.1**k) / h)
    grid2 = Grid.from_bounds([-1.0, -1.0], [1.0, 1.0], [32, 32])
    h2 = grid2.spacing
    xx, yy = grid2.mesh()
    disc = GridDensity(grid2, (xx * xx + yy * yy < 0.3**2).astype(float))
    r0 = math.sqrt(disc.mass() / math.pi)
    trace2 = evolve(disc, cfg)
    err2 = 0.0
    for k, rho in trace2.snapshots:
        r = math.sqrt((rho.values >= 0.5).sum() * h2 * h2 / math.pi)
        err2 = max(err2, abs(r - r0 * 1.1 ** (k / 2)) / h2)
    ok &= len(trace2.snapshots) == 4 and err1 <= 2 and err2 <= 2
    dt = time.perf_counter() - t0
    detail = f"1D length error {err1:.2f}h, 2D radius error {err2:.2f}h (limit 2h)"
    report(10, "set growth", ok, detail, dt, 300)


def test_criterion_11_oracle_agreement():
    t0 = time.perf_counter()
    k1 = []
    for s in range(20):
        g = D.random_density_1d(500 + s)
        f = unit_cap(g)
        k1.append(l1_distance(project_k1_1d(g, 1.0, model="atomic").density, _lp(g, f).density))
    sk = []
    for s in range(5):
        a, b = _separated_pair(s)
        plan, _ = sinkhorn(a, b, 1e-4 * a.grid.diameter**2)
        exact = w2_1d(a, b)
        sk.append(abs(math.sqrt(2 * plan.cost) - exact) / exact)
    gap = max(LP_GAPS)
    dt = time.perf_counter() - t0
    ok = max(k1) <= 1e-4 and max(sk) <= 1e-2 and gap <= 1e-7
    detail = (
        f"k1 vs LP max L1 {max(k1):.1e}, sinkhorn vs exact max {100 * max(sk):.3f}%, "
        f"max LP gap {gap:.1e} over {len(LP_GAPS)} solves"
    )
    report(11, "oracle agreement", ok, detail, dt)


def _separated_pair(seed, cells=64):
    rng = np.random.default_rng(seed)
    grid = Grid.from_bounds([0.0], [1.0], [cells])
    x = grid.axis()
    out = []
    for centre in (rng.uniform(0.2, 0.35), rng.uniform(0.65, 0.8)):
        w = rng.uniform(0.05, 0.1)
        v = np.exp(-0.5 * ((x - centre) / w) ** 2) * (1 + 0.3 * rng.random(cells))
        out.append(GridDensity(grid, v).normalized())
    return out


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    failed = 0
    for fn in tests:
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)

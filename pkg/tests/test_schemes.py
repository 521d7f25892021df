import json
import math

import numpy as np
import pytest

from otproj.errors import Cancelled, Infeasible
from otproj.grid import Grid, GridDensity, l1_distance, mass, total_variation
from otproj.schemes import (
    SchemeConfig,
    evolve,
    heat_step,
    indicator_defect,
    parse_integrand,
    velocity_field,
    w2_step,
)

from oracles import barenblatt_m2


def interval(grid, a, b):
    x = grid.axis()
    return GridDensity(grid, ((x > a) & (x < b)).astype(float))


def test_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig(tau=0.0, t_final=1.0)
    with pytest.raises(ValueError):
        SchemeConfig(tau=0.5, t_final=0.1)
    with pytest.raises(ValueError):
        SchemeConfig(tau=0.1, t_final=1.0, kind="other")
    assert SchemeConfig(tau=0.1, t_final=0.3).steps == 3


def test_parse_integrand():
    assert parse_integrand("porous:2").name == parse_integrand("porous:2.0").name
    assert parse_integrand("entropy")(1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        parse_integrand("nope")


def test_set_growth_lengths_1d():
    grid = Grid.from_bounds([-4.0], [4.0], [256])
    h = grid.spacing
    cfg = SchemeConfig(tau=0.1, t_final=1.0, kind="set_growth")
    trace = evolve(interval(grid, -0.5, 0.5), cfg)
    assert len(trace.records) == 11
    for k, rec in enumerate(trace.records):
        assert rec["mass"] == pytest.approx(1.1**k, rel=1e-9)
        assert rec["indicator_defect"] == 0
        assert rec["tv_bound_ok"]
    for k, rho in trace.snapshots:
        length = (rho.values >= 0.5).sum() * h
        assert abs(length - 1.1**k) <= 2 * h


def test_set_growth_disc_2d():
    grid = Grid.from_bounds([-1.0, -1.0], [1.0, 1.0], [32, 32])
    h = grid.spacing
    x, y = grid.mesh()
    rho0 = GridDensity(grid, (x * x + y * y < 0.3**2).astype(float))
    r0 = math.sqrt(mass(rho0) / math.pi)
    trace = evolve(rho0, SchemeConfig(tau=0.1, t_final=0.3, kind="set_growth"))
    for k, rho in trace.snapshots:
        r = math.sqrt((rho.values >= 0.5).sum() * h * h / math.pi)
        assert abs(r - r0 * 1.1 ** (k / 2)) <= 2 * h
        assert trace.records[k]["max"] <= 1 + 1e-7


def test_set_growth_rejects_bad_input():
    grid = Grid.from_bounds([0.0], [1.0], [16])
    with pytest.raises(ValueError):
        evolve(GridDensity(grid, np.full(16, 0.5)), SchemeConfig(tau=0.1, t_final=0.1, kind="set_growth"))
    with pytest.raises(Infeasible):
        evolve(GridDensity(grid, np.ones(16)), SchemeConfig(tau=0.1, t_final=0.1, kind="set_growth"))


def test_set_growth_truncates_when_box_full():
    grid = Grid.from_bounds([0.0], [1.0], [32])
    trace = evolve(interval(grid, 0.2, 0.8), SchemeConfig(tau=0.5, t_final=3.0, kind="set_growth"))
    assert trace.truncated and "box" in trace.reason
    assert trace.final is trace.snapshots[-1][1]


def test_indicator_defect():
    grid = Grid.from_bounds([0.0], [1.0], [10])
    v = np.zeros(10)
    v[3:6] = 1.0
    v[6] = 0.4
    assert indicator_defect(GridDensity(grid, v))[0] == 0
    v[8] = 0.3
    assert indicator_defect(GridDensity(grid, v))[0] == 1


def test_crowd_static_is_fixed():
    grid = Grid.from_bounds([-2.0], [2.0], [64])
    rho0 = interval(grid, -0.5, 0.5)
    trace = evolve(rho0, SchemeConfig(tau=0.1, t_final=0.5, kind="crowd"))
    assert np.array_equal(trace.final.values, rho0.values)
    assert np.all(trace.column("w2_step") == 0.0)


def test_crowd_translation():
    grid = Grid.from_bounds([-2.0], [2.0], [80])
    h = grid.spacing
    rho0 = interval(grid, -0.5, 0.5)
    a, tau = 0.5, 0.1  # each step moves one cell
    assert a * tau == pytest.approx(h)
    cfg = SchemeConfig(tau=tau, t_final=0.4, kind="crowd", velocity={"name": "constant", "value": [a]})
    trace = evolve(rho0, cfg)
    for w in trace.column("w2_step")[1:]:
        assert w == pytest.approx(tau * a * math.sqrt(mass(rho0)), rel=1e-9)
    assert np.allclose(trace.column("mass"), mass(rho0), rtol=1e-12)


def test_crowd_congestion_respects_cap():
    grid = Grid.from_bounds([-2.0], [2.0], [128])
    rho0 = interval(grid, -1.5, 1.5).with_values(interval(grid, -1.5, 1.5).values * 0.6)
    cfg = SchemeConfig(tau=0.05, t_final=0.5, kind="crowd", velocity={"name": "toward", "point": [0.0], "speed": 1.0}, sigma=0.01)
    trace = evolve(rho0, cfg)
    assert np.all(trace.column("max") <= 1 + 1e-9)
    assert np.allclose(trace.column("mass"), mass(rho0), rtol=1e-9)
    assert trace.metadata["splitting"]


def test_heat_step_conserves_mass_and_smooths():
    grid = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [16, 16])
    rng = np.random.default_rng(0)
    rho = GridDensity(grid, rng.uniform(0, 1, (16, 16)))
    out = heat_step(rho, 1e-3)
    assert mass(out) == pytest.approx(mass(rho), rel=1e-9)
    assert total_variation(out) < total_variation(rho)


def test_velocity_field_shapes():
    grid = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [4, 4])
    assert velocity_field(None, grid).shape == (16, 2)
    v = velocity_field({"name": "toward", "point": [0.5, 0.5], "speed": 2.0}, grid)
    assert np.allclose(np.linalg.norm(v, axis=1), 2.0)


def test_porous_zero_energy_is_stationary():
    grid = Grid.from_bounds([-1.0], [1.0], [32])
    rho0 = GridDensity(grid, np.exp(-grid.axis() ** 2)).normalized()
    trace = evolve(rho0, SchemeConfig(tau=0.1, t_final=0.3, integrand="zero"))
    assert np.array_equal(trace.final.values, rho0.values)


def test_porous_barenblatt_short():
    grid = Grid.from_bounds([-1.5], [1.5], [128])
    t0, tau = 0.01, 2e-3
    rho0 = GridDensity.from_function(grid, lambda x: barenblatt_m2(x, t0), 8).normalized()
    trace = evolve(rho0, SchemeConfig(tau=tau, t_final=0.02, integrand="porous:2"))
    t = t0 + trace.records[-1]["time"]
    exact = GridDensity.from_function(grid, lambda x: barenblatt_m2(x, t), 8).normalized()
    assert l1_distance(trace.final, exact) <= 0.05
    tv = trace.column("tv")
    assert np.all(np.diff(tv) <= 1e-3 * tv[0])


def test_w2_step_2d_matches_translation():
    grid = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [8, 8])
    v = np.zeros((8, 8))
    v[2:4, 2:4] = 1.0
    a = GridDensity(grid, v)
    b = GridDensity(grid, np.roll(v, 1, axis=0))
    assert w2_step(a, b) == pytest.approx(grid.spacing * math.sqrt(mass(a)), rel=1e-9)


def test_export_manifest(tmp_path):
    grid = Grid.from_bounds([-2.0], [2.0], [64])
    trace = evolve(interval(grid, -0.5, 0.5), SchemeConfig(tau=0.1, t_final=0.4, kind="set_growth", stride=2))
    path = trace.export(tmp_path)
    manifest = json.loads(path.read_text())
    assert manifest["steps"] == 4
    assert [s["step"] for s in manifest["snapshots"]] == [0, 2, 4]
    for s in manifest["snapshots"]:
        assert (tmp_path / s["path"]).exists()
    header = (tmp_path / "trace.csv").read_text().splitlines()[0].split(",")
    assert header[:8] == ["step", "time", "mass", "tv", "w2_step", "min", "max", "violation"]


def test_cancel_and_callback():
    import threading

    grid = Grid.from_bounds([-2.0], [2.0], [64])
    ev = threading.Event()
    seen = []

    def cb(step, rec):
        seen.append(step)
        if step == 2:
            ev.set()

    with pytest.raises(Cancelled):
        evolve(interval(grid, -0.5, 0.5), SchemeConfig(tau=0.1, t_final=1.0, kind="set_growth"), callback=cb, cancel=ev)
    assert seen == [1, 2]

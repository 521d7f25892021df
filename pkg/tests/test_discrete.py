import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from otproj.discrete import c_transform, sinkhorn, solve_ot_lp, sq_cost
from otproj.errors import InstanceTooLarge, MassMismatch, NotConverged
from otproj.grid import Grid, GridDensity
from otproj.ot1d import w2_squared_1d

from oracles import w2_point_masses_1d
from test_ot1d import random_density


def test_identity_plan():
    grid = Grid.from_bounds([0.0], [1.0], [16])
    a = random_density(3, grid=grid)
    plan, pot = solve_ot_lp(a, a)
    assert plan.cost == pytest.approx(0.0, abs=1e-15)
    assert np.all(plan.rows == plan.cols)
    assert pot.slack <= 1e-7


def test_two_cell_instance():
    grid = Grid.from_bounds([-0.5], [1.5], [2])
    a = GridDensity(grid, [0.5, 0.5])
    plan, _ = solve_ot_lp(a, a)
    assert plan.cost == 0.0




@pytest.mark.parametrize("seed", range(5))
def test_lp_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    grid = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [5, 5])
    va, vb = np.zeros(25), np.zeros(25)
    ia, ib = rng.choice(25, 3, replace=False), rng.choice(25, 3, replace=False)
    va[ia], vb[ib] = rng.random(3) + 0.1, rng.random(3) + 0.1
    vb *= va.sum() / vb.sum()
    a, b = GridDensity(grid, va.reshape(5, 5)), GridDensity(grid, vb.reshape(5, 5))
    plan, pot = solve_ot_lp(a, b)
    pts = grid.points()
    # vertex enumeration along orderings visits every extreme point for 3 x 3 supports
    best = np.inf
    c = sq_cost(pts[np.sort(ia)], pts[np.sort(ib)])
    ma, mb = va[np.sort(ia)] * grid.cell_volume, vb[np.sort(ib)] * grid.cell_volume
    for pa in itertools.permutations(range(3)):
        for pb in itertools.permutations(range(3)):
            ra, rb = ma.copy(), mb.copy()
            i = j = 0
            cost = 0.0
            while i < 3 and j < 3:
                m = min(ra[pa[i]], rb[pb[j]])
                cost += m * c[pa[i], pb[j]]
                ra[pa[i]] -= m
                rb[pb[j]] -= m
                if ra[pa[i]] <= 1e-15 * ma.sum():
                    i += 1
                else:
                    j += 1
            best = min(best, cost)
    assert plan.cost == pytest.approx(best, rel=1e-9)
    assert pot.slack <= 1e-7


@pytest.mark.parametrize("seed", range(5))
def test_lp_matches_point_mass_oracle_1d(seed):
    grid = Grid.from_bounds([0.0], [1.0], [128])
    a, b = random_density(seed, grid=grid), random_density(40 + seed, grid=grid)
    plan, pot = solve_ot_lp(a, b)
    x = grid.axis()
    ref = w2_point_masses_1d(x, a.values * grid.spacing, x, b.values * grid.spacing)
    assert plan.w2 == pytest.approx(ref, rel=1e-9)
    assert pot.slack <= 1e-7


def test_lp_plan_marginals_and_monotone():
    grid = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [10, 10])
    rng = np.random.default_rng(2)
    a = GridDensity(grid, rng.random((10, 10))).normalized()
    b = GridDensity(grid, rng.random((10, 10)) ** 3).normalized()
    plan, pot = solve_ot_lp(a, b)
    vol = grid.cell_volume
    assert np.allclose(plan.source_marginal(), a.values * vol, rtol=1e-7, atol=1e-12)
    assert np.allclose(plan.target_marginal(), b.values * vol, rtol=1e-7, atol=1e-12)
    pts = grid.points()
    x, y = pts[plan.rows], pts[plan.cols]
    idx = rng.integers(len(x), size=(400, 2))
    lhs = ((x[idx[:, 0]] - y[idx[:, 0]]) ** 2).sum(1) + ((x[idx[:, 1]] - y[idx[:, 1]]) ** 2).sum(1)
    rhs = ((x[idx[:, 0]] - y[idx[:, 1]]) ** 2).sum(1) + ((x[idx[:, 1]] - y[idx[:, 0]]) ** 2).sum(1)
    assert np.all(lhs <= rhs + 1e-12)
    # φ = (φ^c)^c on the support of a
    phic = c_transform(pot.phi, grid, grid)
    phicc = c_transform(phic, grid, grid)
    live = a.values > 0
    assert np.allclose(phicc[live], pot.phi[live], atol=1e-6)
    assert pot.slack <= 1e-7


def test_lp_errors():
    grid = Grid.from_bounds([0.0], [1.0], [32])
    a = random_density(1, grid=grid)
    with pytest.raises(MassMismatch):
        solve_ot_lp(a, a.with_values(a.values * 2))
    with pytest.raises(InstanceTooLarge):
        solve_ot_lp(a, a, cap=10)


def test_lp_cost_close_to_piecewise_constant_w2():
    grid = Grid.from_bounds([-4.0], [4.0], [128])
    x = grid.axis()
    a = GridDensity(grid, np.exp(-x**2)).normalized()
    b = GridDensity(grid, np.exp(-(x - 1) ** 2 / 2)).normalized()
    plan, _ = solve_ot_lp(a, b)
    assert plan.cost == pytest.approx(0.5 * w2_squared_1d(a, b), rel=1e-3)


def test_c_transform_examples():
    grid = Grid.from_bounds([-2.0], [2.0], [81])
    assert np.allclose(c_transform(np.zeros(81), grid, grid), 0.0)
    x = grid.axis()
    chi = -0.5 * x * x
    out = c_transform(chi, grid, grid)
    inner = np.abs(x) <= 1.0
    assert np.allclose(out[inner], 0.25 * x[inner] ** 2, atol=grid.spacing**2)
    rng = np.random.default_rng(0)
    chi = rng.standard_normal(81)
    c1 = c_transform(chi, grid, grid)
    c3 = c_transform(c_transform(c1, grid, grid), grid, grid)
    assert np.allclose(c3, c1, atol=1e-12)


def separated_pair(seed, cells=64):
    """Random bumps on either half of [0, 1], so transport dominates the entropic bias."""
    rng = np.random.default_rng(seed)
    grid = Grid.from_bounds([0.0], [1.0], [cells])
    x = grid.axis()
    out = []
    for centre in (rng.uniform(0.2, 0.35), rng.uniform(0.65, 0.8)):
        w = rng.uniform(0.05, 0.1)
        v = np.exp(-0.5 * ((x - centre) / w) ** 2) * (1 + 0.3 * rng.random(cells))
        out.append(GridDensity(grid, v).normalized())
    return out


@pytest.mark.parametrize("seed", range(3))
def test_sinkhorn_against_exact_1d(seed):
    a, b = separated_pair(seed)
    plan, _ = sinkhorn(a, b, 1e-3 * a.grid.diameter**2)
    assert plan.cost == pytest.approx(0.5 * w2_squared_1d(a, b), rel=1e-2)


def test_sinkhorn_identity_small_cost():
    grid = Grid.from_bounds([0.0], [1.0], [32])
    a = random_density(2, grid=grid)
    eps = 1e-3
    plan, _ = sinkhorn(a, a, eps)
    assert plan.cost <= eps


def test_sinkhorn_translation_monotone_in_eps():
    grid = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [12, 12])
    v = np.zeros((12, 12))
    v[2:5, 3:6] = 1.0
    a = GridDensity(grid, v).normalized()
    b = GridDensity(grid, np.roll(v, 3, axis=0)).normalized()
    shift = 3 * grid.spacing
    costs = [sinkhorn(a, b, e)[0].cost for e in (1e-2, 3e-3, 1e-3)]
    assert costs[0] > costs[1] > costs[2]
    assert costs[2] == pytest.approx(0.5 * shift**2, rel=0.05)


def test_sinkhorn_not_converged():
    grid = Grid.from_bounds([0.0], [1.0], [32])
    a, b = random_density(1, grid=grid), random_density(2, grid=grid)
    with pytest.raises(NotConverged) as err:
        sinkhorn(a, b, 1e-4, max_iter=10)
    assert err.value.error > 0


@given(st.integers(0, 10**6))
def test_lp_duality_gap(seed):
    grid = Grid.from_bounds([0.0], [1.0], [24])
    a, b = random_density(seed, grid=grid), random_density(seed + 1, grid=grid)
    _, pot = solve_ot_lp(a, b)
    assert pot.slack <= 1e-7

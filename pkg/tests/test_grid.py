import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otproj.errors import TargetOutsideDomain
from otproj.grid import (
    ConstraintField,
    Grid,
    GridDensity,
    l1_distance,
    mass,
    pushforward,
    rescale_mass,
    second_moment,
    total_variation,
)

from oracles import gaussian

values_1d = arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 10))


def test_grid_geometry():
    g = Grid.from_bounds([0.0, 0.0], [1.0, 2.0], [4, 8])
    assert g.spacing == 0.25
    assert g.cell_volume == 0.0625
    assert np.allclose(g.axis(0), [0.125, 0.375, 0.625, 0.875])
    assert np.allclose(g.edges(1)[[0, -1]], [0.0, 2.0])
    with pytest.raises(ValueError):
        Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [4, 8])
    with pytest.raises(ValueError):
        Grid(1, (1,), (0.0,), 1.0)


def test_density_rejects_negative_and_nan():
    g = Grid.from_bounds([0.0], [1.0], [4])
    with pytest.raises(ValueError):
        GridDensity(g, [1.0, -1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        GridDensity(g, [1.0, np.nan, 0.0, 0.0])


def test_tv_indicator_aligned():
    g = Grid.from_bounds([-1.0], [2.0], [30])
    rho = GridDensity(g, ((g.axis() > 0) & (g.axis() < 1)).astype(float))
    assert total_variation(rho) == 2.0


def test_tv_constant_and_gaussian():
    g = Grid.from_bounds([-6.0], [6.0], [512])
    assert total_variation(ConstraintField.constant(g, 3.0)) == 0.0
    rho = GridDensity.from_function(g, gaussian)
    assert total_variation(rho) == pytest.approx(2 / math.sqrt(2 * math.pi), abs=1e-3)


def test_tv_2d_zero_extension_counts_box_edges():
    g = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [4, 4])
    rho = GridDensity(g, np.ones((4, 4)))
    # all four box sides count; the upper corner cell carries a diagonal jump
    assert total_variation(rho) == pytest.approx(g.spacing * (14 + math.sqrt(2)), rel=1e-14)


def test_mass_examples():
    g = Grid.from_bounds([-1.0], [1.0], [40])
    assert mass(GridDensity(g, np.zeros(40))) == 0.0
    a = (np.abs(g.axis()) < 0.5).astype(float)
    assert mass(GridDensity(g, a / (a.sum() * g.spacing))) == pytest.approx(1.0, abs=1e-12)


def test_second_moment():
    g = Grid.from_bounds([-1.0], [1.0], [2000])
    u = GridDensity(g, np.full(2000, 0.5))
    assert second_moment(u) == pytest.approx(1 / 3, abs=1e-6)
    g = Grid.from_bounds([-1.5], [1.5], [3])
    assert second_moment(GridDensity(g, [0.0, 1.0, 0.0])) == 0.0


def test_second_moment_parallel_axis():
    g = Grid.from_bounds([-4.0], [4.0], [64])
    rng = np.random.default_rng(0)
    v = np.zeros(64)
    v[20:40] = rng.random(20)
    rho = GridDensity(g, v)
    shifted = GridDensity(g, np.roll(v, 5))
    a = 5 * g.spacing
    mean = (g.axis() * v).sum() * g.spacing
    assert second_moment(shifted) == pytest.approx(second_moment(rho) + 2 * a * mean + a * a * mass(rho), rel=1e-12)


def test_rescale_mass():
    g = Grid.from_bounds([0.0], [1.0], [10])
    rho = GridDensity(g, np.ones(10))
    assert rescale_mass(rho, 1.0).values.tolist() == rho.values.tolist()
    assert mass(rescale_mass(rho, 1.1)) == pytest.approx(1.1, abs=1e-12)
    two = rescale_mass(rescale_mass(rho, 1.3), 0.7)
    assert np.allclose(two.values, rescale_mass(rho, 1.3 * 0.7).values, rtol=1e-15)
    with pytest.raises(ValueError):
        rescale_mass(rho, 0.0)


def test_pushforward_identity_and_shift():
    g = Grid.from_bounds([0.0], [4.0], [16])
    v = np.zeros(16)
    v[4:8] = [1, 2, 3, 4]
    rho = GridDensity(g, v)
    assert np.array_equal(pushforward(rho, g.axis()).values, v)
    moved = pushforward(rho, g.axis() + 3 * g.spacing)
    assert np.allclose(moved.values, np.roll(v, 3), atol=1e-15)


def test_pushforward_dilation():
    g = Grid.from_bounds([0.0], [2.0], [400])
    x = g.axis()
    rho = GridDensity(g, (x < 1).astype(float))
    out = pushforward(rho, 2 * x)
    assert l1_distance(out, GridDensity(g, np.full(400, 0.5))) < 5 * g.spacing


def test_pushforward_outside_box():
    g = Grid.from_bounds([0.0], [1.0], [10])
    rho = GridDensity(g, np.ones(10))
    with pytest.raises(TargetOutsideDomain):
        pushforward(rho, g.axis() + 0.5)


def test_pushforward_2d_conserves_mass():
    g = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], [12, 12])
    rng = np.random.default_rng(1)
    rho = GridDensity(g, rng.random((12, 12)))
    t = g.points() + 0.03 * rng.standard_normal((144, 2))
    assert mass(pushforward(rho, t)) == pytest.approx(mass(rho), rel=1e-12)


@given(values_1d, st.floats(0, 100))
def test_tv_homogeneous(v, lam):
    g = Grid.from_bounds([0.0], [1.0], [len(v)])
    a = total_variation(GridDensity(g, v))
    b = total_variation(GridDensity(g, lam * v))
    assert b == pytest.approx(lam * a, rel=1e-12, abs=1e-300)


@given(st.integers(2, 12).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, n), elements=st.floats(0, 5)),
    arrays(np.float64, (n, n), elements=st.floats(0, 5)),
)))
def test_tv_subadditive_2d(pair):
    a, b = pair
    g = Grid.from_bounds([0.0, 0.0], [1.0, 1.0], list(a.shape))
    ta, tb = total_variation(GridDensity(g, a)), total_variation(GridDensity(g, b))
    assert total_variation(GridDensity(g, a + b)) <= (ta + tb) * (1 + 1e-12) + 1e-300


@given(values_1d, st.data())
def test_pushforward_conserves_mass(v, data):
    g = Grid.from_bounds([0.0], [1.0], [len(v)])
    t = data.draw(arrays(np.float64, len(v), elements=st.floats(0, 1)))
    rho = GridDensity(g, v)
    assert mass(pushforward(rho, t)) == pytest.approx(mass(rho), rel=1e-12, abs=1e-300)


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 10)))
def test_tv_monotone_profile(v):
    v = np.sort(v)
    g = Grid.from_bounds([0.0], [1.0], [len(v)])
    # zero extension adds the jumps up from 0 at the left and down at the right
    assert total_variation(GridDensity(g, v)) == pytest.approx(v[0] + (v[-1] - v[0]) + v[-1], rel=1e-12, abs=1e-300)

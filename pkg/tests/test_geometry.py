"""Strip grid: measures, means, pairings, potential integrals, CSV I/O."""

import numpy as np
import pytest

from dplab.geometry import StripGrid, field_for_grid, load_field, save_field
from dplab.graphs import DoubleObstacle, Stefan


@pytest.fixture
def grid():
    return StripGrid(8, 5)


def test_measure_weights(grid):
    assert grid.bulk_weights.sum() == pytest.approx(grid.area, abs=1e-12)
    assert grid.surface_weights.sum() == pytest.approx(grid.perimeter, abs=1e-12)
    wide = StripGrid(12, 7, width=2.5, height=0.75)
    assert wide.bulk_weights.sum() == pytest.approx(2.5 * 0.75, abs=1e-12)
    assert wide.surface_weights.sum() == pytest.approx(5.0, abs=1e-12)


def test_mean_examples(grid):
    assert grid.mean(grid.constant(3.25)) == pytest.approx(3.25, abs=1e-14)
    # ones on interior rows, zero on the two boundary rows
    z = np.ones(grid.shape)
    z[:, 0] = z[:, -1] = 0.0
    interior_weight = grid.bulk_weights[:, 1:-1].sum()
    expected = interior_weight / grid.total_measure
    assert grid.mean(z) == pytest.approx(expected, abs=1e-13)
    assert expected == pytest.approx((grid.ny - 2) / (grid.ny - 1) / 3.0, abs=1e-13)
    # linearity
    rng = np.random.default_rng(0)
    z1 = rng.standard_normal(grid.shape)
    z2 = rng.standard_normal(grid.shape)
    assert grid.mean(2.5 * z1 + z2) == pytest.approx(
        2.5 * grid.mean(z1) + grid.mean(z2), abs=1e-13)


def test_project(grid):
    rng = np.random.default_rng(1)
    assert np.abs(grid.project(grid.constant(4.0))).max() == pytest.approx(0.0, abs=1e-14)
    z = rng.standard_normal(grid.shape)
    p = grid.project(z)
    assert abs(grid.mean(p)) <= 1e-13
    assert np.abs(grid.project(p) - p).max() <= 1e-13
    z0 = z - grid.mean(z)
    assert np.abs(grid.project(z0) - z0).max() <= 1e-13


def test_inner_h(grid):
    ones = grid.constant(1.0)
    assert grid.inner_h(ones, ones) == pytest.approx(3.0, abs=1e-12)
    rng = np.random.default_rng(2)
    a = rng.standard_normal(grid.shape)
    b = rng.standard_normal(grid.shape)
    assert grid.inner_h(a, b) == grid.inner_h(b, a)
    assert grid.inner_h(a, a) >= 0.0
    assert abs(grid.inner_h(grid.project(a), ones)) <= 1e-12
    assert grid.mean(a) == pytest.approx(grid.inner_h(a, ones) / grid.total_measure,
                                         abs=1e-13)


def test_l1_potential(grid):
    graph = Stefan(1.0, 1.0, 1.0)
    assert grid.l1_potential(graph, 0.3, grid.zeros()) == (0.0, 0.0)
    plateau = grid.constant(0.6)  # inside [0, L]
    assert grid.l1_potential(graph, 0.3, plateau) == (0.0, 0.0)
    # random field against a direct summation oracle
    rng = np.random.default_rng(3)
    u = rng.uniform(-2.0, 3.0, size=grid.shape)
    lam = 0.25
    env = np.asarray(graph.moreau_envelope(lam, u))
    bulk_oracle = 0.0
    for i in range(grid.nx):
        for j in range(grid.ny):
            w = grid.hx * grid.hy * (0.5 if j in (0, grid.ny - 1) else 1.0)
            bulk_oracle += w * env[i, j]
    surf_oracle = grid.hx * sum(env[i, j] for i in range(grid.nx)
                                for j in (0, grid.ny - 1))
    bulk, surf = grid.l1_potential(graph, lam, u)
    assert bulk == pytest.approx(bulk_oracle, abs=1e-12)
    assert surf == pytest.approx(surf_oracle, abs=1e-12)
    # lam = 0 integrates the bare potential
    ob = DoubleObstacle()
    inside = grid.constant(0.4)
    assert grid.l1_potential(ob, 0.0, inside) == (0.0, 0.0)


def test_validation():
    with pytest.raises(ValueError):
        StripGrid(3, 5)
    with pytest.raises(ValueError):
        StripGrid(8, 2)
    with pytest.raises(ValueError):
        StripGrid(8, 5, width=-1.0)
    grid = StripGrid(8, 5)
    with pytest.raises(ValueError, match="shape"):
        grid.mean(np.zeros((4, 4)))


def test_field_csv_round_trip(tmp_path, grid):
    rng = np.random.default_rng(4)
    z = rng.standard_normal(grid.shape)
    path = tmp_path / "field.csv"
    save_field(path, grid, z)
    nx, ny, hx, hy, back = load_field(path)
    assert (nx, ny) == grid.shape
    assert hx == grid.hx and hy == grid.hy
    assert np.array_equal(back, z)  # repr round-trips floats exactly
    assert np.array_equal(field_for_grid(grid, path), z)
    other = StripGrid(16, 9)
    with pytest.raises(ValueError, match="grid"):
        field_for_grid(other, path)

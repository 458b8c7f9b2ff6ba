"""Estimate records against dense norm oracles, weak residual ordering,
and the cascade report machinery."""

import numpy as np
import pytest

from dplab import dynamics
from dplab.diagnostics import (CascadeMember, EstimateRecorder, cascade_study,
                               test_basis, weak_residual)
from dplab.dynamics import SolverConfig, run
from dplab.geometry import StripGrid
from dplab.graphs import Identity, Stefan, StefanPi, ZeroPi
from dplab.operators import OperatorSet


@pytest.fixture(scope="module")
def small():
    grid = StripGrid(8, 5)
    return grid, OperatorSet(grid)


def dense_dual_norm_sq(grid, ops, w):
    A = ops.stiffness.toarray()
    M = ops.mass
    vals, vecs = np.linalg.eigh(A)
    b = M * w.ravel()
    coef = vecs.T @ b
    inv = np.where(vals > 1e-10 * vals.max(), 1.0 / np.where(vals == 0, 1, vals), 0.0)
    x = vecs @ (inv * coef)
    x -= (M * x).sum() / grid.total_measure
    return float(b @ x)


def test_zero_trajectory_records_vanish(small):
    grid, ops = small
    rec = EstimateRecorder()
    cfg = SolverConfig(epsilon=0.1, lam=0.1, dt=0.01, horizon=0.05)
    run(ops, Identity(), ZeroPi(), grid.zeros(), grid.zeros(), cfg, rec)
    for r in rec.records:
        for name in ("weak_norm", "energy_integral", "rate_energy",
                     "potential_flux", "state_h", "viscous_regularity",
                     "potential_grad", "nonlinear_h", "mass_drift"):
            assert getattr(r, name) == pytest.approx(0.0, abs=1e-20)


def test_single_step_record_matches_dense_oracle(small):
    grid, ops = small
    graph = Identity()
    pi = ZeroPi()
    X, Y = grid.meshes()
    u0 = 0.3 + np.cos(2 * np.pi * X) * (1.0 + 0.5 * Y)
    eps, lam, dt = 0.2, 0.05, 0.01
    cfg = SolverConfig(epsilon=eps, lam=lam, dt=dt, horizon=dt)
    rec = EstimateRecorder()
    traj = run(ops, graph, pi, grid.zeros(), u0, cfg, rec)
    m0 = traj.m0
    r0, r1 = rec.records

    v0 = ops.regularize_initial(u0, eps)
    v1 = traj.final.v
    u1 = traj.final.u
    mu1 = traj.final.mu
    delta = (v1 - v0) / dt
    A = ops.stiffness.toarray()

    def a_form(p, q):
        return float(p.ravel() @ (A @ q.ravel()))

    def h_sq(z):
        return grid.inner_h(z, z)

    envb0, envs0 = grid.l1_potential(graph, lam, v0 + m0)
    envb1, envs1 = grid.l1_potential(graph, lam, u1)
    dphi1 = (A @ v1.ravel()) / ops.mass

    assert r1.weak_norm == pytest.approx(
        lam * h_sq(v1) + dense_dual_norm_sq(grid, ops, v1), rel=1e-9, abs=1e-11)
    assert r1.energy_integral == pytest.approx(
        0.5 * eps * dt * a_form(v0, v0) + 2 * dt * envb0 + 2 * dt * envs0,
        rel=1e-10, abs=1e-12)
    assert r1.rate_energy == pytest.approx(
        2 * lam * dt * h_sq(delta) + dt * dense_dual_norm_sq(grid, ops, delta)
        + eps * a_form(v1, v1) + 2 * envb1 + 2 * envs1, rel=1e-9, abs=1e-11)
    assert r1.potential_flux == pytest.approx(dt * a_form(mu1, mu1),
                                              rel=1e-10, abs=1e-12)
    assert r1.potential_grad == r1.potential_flux
    assert r1.state_h == pytest.approx(h_sq(u1), rel=1e-12)
    assert r1.viscous_regularity == pytest.approx(
        lam * a_form(v1, v1)
        + eps * dt * float((dphi1 * dphi1 * ops.mass).sum()), rel=1e-9, abs=1e-11)
    assert r1.nonlinear_h == pytest.approx(
        dt * h_sq(traj.final.xi_lambda), rel=1e-10, abs=1e-12)
    assert r0.step == 0 and r1.step == 1


def test_cumulative_fields_monotone(small):
    grid, ops = small
    X, _ = grid.meshes()
    u0 = 0.5 + np.cos(2 * np.pi * X)
    cfg = SolverConfig(epsilon=0.1, lam=0.01, dt=0.002, horizon=0.1)
    rec = EstimateRecorder()
    run(ops, Stefan(1.0, 1.0, 1.0), StefanPi(1.0), grid.zeros(), u0, cfg, rec)
    assert len(rec.records) == 51
    for name in ("energy_integral", "potential_flux", "potential_grad",
                 "nonlinear_h"):
        vals = [getattr(r, name) for r in rec.records]
        assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:])), name
    assert all(np.isfinite(r.rate_energy) for r in rec.records)
    assert max(r.mass_drift for r in rec.records) <= 1e-12


def test_weak_residual_zero_run(small):
    grid, ops = small
    cfg = SolverConfig(epsilon=0.1, lam=0.1, dt=0.01, horizon=0.05)
    traj = run(ops, Identity(), ZeroPi(), grid.zeros(), grid.zeros(), cfg)
    assert weak_residual(ops, traj) <= 1e-12


def test_weak_residual_identity_manufactured(small):
    """For the identity endpoint the defect is pure discretization error,
    first order in dt."""
    grid, ops = small
    X, Y = grid.meshes()
    u0 = np.cos(2 * np.pi * X) * np.cos(np.pi * Y)
    vals = []
    for dt in (4e-3, 2e-3):
        cfg = SolverConfig(epsilon=0.0, lam=0.0, dt=dt, horizon=0.02,
                           newton_tol=1e-9)
        traj = run(ops, Identity(), ZeroPi(), grid.zeros(), u0, cfg)
        vals.append(weak_residual(ops, traj))
    assert vals[1] < vals[0]


def test_weak_residual_decreases_with_regularization():
    """Same grid, the late cascade member has a smaller defect than the
    early one (the defect measures the regularization terms)."""
    grid = StripGrid(16, 9)
    ops = OperatorSet(grid)
    X, _ = grid.meshes()
    u0 = 0.5 + 1.0 * np.cos(2 * np.pi * X)
    graph, pi = Stefan(1.0, 1.0, 1.0), StefanPi(1.0)
    out = []
    for eps, lam in ((0.2, 0.04), (0.05, 0.0025)):
        cfg = SolverConfig(epsilon=eps, lam=lam, dt=0.004, horizon=0.1)
        traj = run(ops, graph, pi, grid.zeros(), u0, cfg)
        out.append(weak_residual(ops, traj))
    assert out[1] < out[0]


def test_test_basis_count_and_constant(small):
    grid, ops = small
    basis = test_basis(grid)
    assert len(basis) == 24
    assert np.abs(basis[0] - 1.0).max() == 0.0


def test_cascade_single_member_reduces_to_run(small):
    grid, ops = small

    def u0(g):
        X, _ = g.meshes()
        return 0.5 + 0.4 * np.cos(2 * np.pi * X)

    report = cascade_study(
        Stefan(1.0, 1.0, 1.0), StefanPi(1.0), u0, lambda g: g.zeros(),
        0.05, [CascadeMember(0.1, 0.01, 0.005, 8, 5)], snapshot_count=5)
    assert len(report.members) == 1
    assert report.cauchy_h == [] and report.cauchy_v0star == []
    # cross-check the terminal record against a direct run
    rec = EstimateRecorder()
    cfg = SolverConfig(epsilon=0.1, lam=0.01, dt=0.005, horizon=0.05)
    run(ops, Stefan(1.0, 1.0, 1.0), StefanPi(1.0), grid.zeros(), u0(grid), cfg, rec)
    assert report.terminals[0].weak_norm == pytest.approx(
        rec.records[-1].weak_norm, rel=1e-12)


def test_cascade_identity_cauchy_first_order_in_dt():
    def u0(g):
        X, Y = g.meshes()
        return np.cos(2 * np.pi * X) * np.cos(np.pi * Y)

    members = [CascadeMember(0.0, 0.0, dt, 16, 9) for dt in (4e-3, 2e-3, 1e-3)]
    report = cascade_study(Identity(), ZeroPi(), u0, lambda g: g.zeros(),
                           0.04, members, snapshot_count=5, newton_tol=1e-9)
    ratios_h = [a / b for a, b in zip(report.cauchy_h, report.cauchy_h[1:])]
    ratios_s = [a / b for a, b in zip(report.cauchy_v0star, report.cauchy_v0star[1:])]
    for r in ratios_h + ratios_s:
        assert 1.5 <= r <= 2.8
    # no regularization: scaled ratios are skipped for eps = 0 members
    assert report.scaled_ratios == {}


def test_cascade_schedule_guard():
    def u0(g):
        return g.constant(0.5)

    with pytest.raises(ValueError, match="lam <= eps"):
        cascade_study(Identity(), ZeroPi(), u0, lambda g: g.zeros(), 0.02,
                      [CascadeMember(0.1, 0.5, 0.01, 8, 5)])
    with pytest.raises(ValueError, match="empty"):
        cascade_study(Identity(), ZeroPi(), u0, lambda g: g.zeros(), 0.02, [])


def test_cascade_nested_grid_restriction():
    def u0(g):
        X, _ = g.meshes()
        return 0.1 * np.cos(2 * np.pi * X)

    members = [CascadeMember(0.0, 0.0, 2e-3, 8, 5),
               CascadeMember(0.0, 0.0, 1e-3, 16, 9)]
    report = cascade_study(Identity(), ZeroPi(), u0, lambda g: g.zeros(),
                           0.02, members, snapshot_count=5, newton_tol=1e-9)
    assert len(report.cauchy_h) == 1 and report.cauchy_h[0] > 0.0
    bad = [CascadeMember(0.0, 0.0, 2e-3, 8, 5), CascadeMember(0.0, 0.0, 1e-3, 12, 7)]
    with pytest.raises(ValueError, match="nested"):
        cascade_study(Identity(), ZeroPi(), u0, lambda g: g.zeros(),
                      0.02, bad, snapshot_count=5, newton_tol=1e-9)

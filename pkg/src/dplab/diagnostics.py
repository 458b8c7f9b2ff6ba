"""Per-step estimate monitoring, weak-form residuals, and cascade studies.

Every quantity that the scheme keeps uniformly bounded while the
regularization parameters shrink is evaluated each step and accumulated in
an EstimateRecord.  Time integrals of state quantities use left-endpoint
quadrature; rate quantities (backward differences, the potential mu) are
attributed to the step interval they belong to.  The monitored columns:

    weak_norm           lam*|v(t)|_H^2 + |v(t)|_*^2
    energy_integral     (eps/2) int |v|_V0^2 + 2 int ||env(u)||_L1(bulk)
                        + 2 int ||env(u_G)||_L1(surf)
    rate_energy         2 lam int |v'|_H^2 + int |v'|_*^2 + eps |v(t)|_V0^2
                        + 2 ||env(u(t))||_L1(bulk) + 2 ||env(u_G(t))||_L1(surf)
    potential_flux      int a(P mu, P mu)
    state_h             |u(t)|_H^2
    viscous_regularity  lam |v(t)|_V0^2 + eps int |mass^{-1} A v|_H^2
    potential_grad      int a(mu, mu)   (equals potential_flux: the form
                        does not see the mean)
    nonlinear_h         int |beta_lam(u)|_H^2
    mass_drift          |mean(u(t)) - m0|

Here |.|_* is the dual norm computed through the mean-zero solve, and env
is the Moreau envelope of the graph potential (the potential itself when
lam = 0).  The cascade study runs a schedule of (eps, lam, dt, grid)
members, reports the terminal records, boundedness ratios, consecutive
Cauchy differences in both candidate norms, and the weak-form residual of
each member.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .dynamics import NumericsError, SolverConfig, Trajectory, beta_value
from .geometry import StripGrid
from .graphs import MonotoneGraph, PiFunction, epsilon0
from .operators import OperatorSet

__all__ = [
    "EstimateRecord",
    "EstimateRecorder",
    "discrete_energy",
    "weak_residual",
    "CascadeMember",
    "CascadeReport",
    "cascade_study",
    "ESTIMATE_COLUMNS",
]

ESTIMATE_COLUMNS = (
    "step", "t", "weak_norm", "energy_integral", "rate_energy", "potential_flux",
    "state_h", "viscous_regularity", "potential_grad", "nonlinear_h", "mass_drift",
    "newton_iters", "newton_residual",
)

#: terminal fields expected uniformly bounded in lam (and in eps below the
#: threshold), and the fields carrying the (1 + lam/eps) scaling
UNIFORM_FIELDS = ("weak_norm", "energy_integral", "rate_energy", "potential_flux")
SCALED_FIELDS = ("state_h", "viscous_regularity", "potential_grad", "nonlinear_h")


@dataclass
class EstimateRecord:
    step: int
    t: float
    weak_norm: float
    energy_integral: float
    rate_energy: float
    potential_flux: float
    state_h: float
    viscous_regularity: float
    potential_grad: float
    nonlinear_h: float
    mass_drift: float
    newton_iters: int
    newton_residual: float
    # running integrals (extended per step)
    int_v_v0: float = 0.0
    int_env_bulk: float = 0.0
    int_env_surf: float = 0.0
    int_rate_h: float = 0.0
    int_rate_star: float = 0.0
    int_mu_v0: float = 0.0
    int_dphi_h: float = 0.0
    int_beta_h: float = 0.0
    # instantaneous integrands cached for the left-endpoint rule
    inst_v_v0: float = 0.0
    inst_env_bulk: float = 0.0
    inst_env_surf: float = 0.0
    inst_dphi_h: float = 0.0

    def csv_row(self) -> str:
        vals = [self.step, repr(self.t)]
        for name in ESTIMATE_COLUMNS[2:11]:
            vals.append(repr(getattr(self, name)))
        vals.append(self.newton_iters)
        vals.append(repr(self.newton_residual))
        return ",".join(str(v) for v in vals)


class EstimateRecorder:
    """Accumulates one EstimateRecord per accepted step (plus a baseline)."""

    def __init__(self):
        self.records: list[EstimateRecord] = []
        self._ops = None
        self._graph = None
        self._cfg = None
        self._warm_v = None
        self._warm_rate = None

    def start(self, ops: OperatorSet, graph, cfg, state0):
        self._ops = ops
        self._graph = graph
        self._cfg = cfg
        grid = ops.grid
        lam, eps = cfg.lam, cfg.epsilon
        v0 = state0.v
        sol = ops.solve_f_inverse(v0)
        self._warm_v = sol
        star = grid.inner_h(v0, sol)
        env_b, env_s = grid.l1_potential(graph, lam, state0.u)
        inst_v_v0 = ops.apply_a(v0, v0)
        dphi = ops.apply_subdiff_phi(v0)
        inst_dphi = grid.inner_h(dphi, dphi)
        rec = EstimateRecord(
            step=0, t=0.0,
            weak_norm=lam * grid.inner_h(v0, v0) + star,
            energy_integral=0.0,
            rate_energy=eps * inst_v_v0 + 2.0 * env_b + 2.0 * env_s,
            potential_flux=0.0,
            state_h=grid.inner_h(state0.u, state0.u),
            viscous_regularity=lam * inst_v_v0,
            potential_grad=0.0,
            nonlinear_h=0.0,
            mass_drift=0.0,
            newton_iters=0,
            newton_residual=0.0,
            inst_v_v0=inst_v_v0,
            inst_env_bulk=env_b,
            inst_env_surf=env_s,
            inst_dphi_h=inst_dphi,
        )
        self._append(rec)

    def on_step(self, prev_state, state):
        ops, grid, graph, cfg = self._ops, self._ops.grid, self._graph, self._cfg
        lam, eps, dt = cfg.lam, cfg.epsilon, cfg.dt
        last = self.records[-1]

        v = state.v
        delta = (state.v - prev_state.v) / dt
        sol_v = ops.solve_f_inverse(v, x0=self._warm_v)
        self._warm_v = sol_v
        star_v = grid.inner_h(v, sol_v)
        sol_d = ops.solve_f_inverse(delta, x0=self._warm_rate)
        self._warm_rate = sol_d
        star_d = grid.inner_h(delta, sol_d)

        env_b, env_s = grid.l1_potential(graph, lam, state.u)
        inst_v_v0 = ops.apply_a(v, v)
        dphi = ops.apply_subdiff_phi(v)
        inst_dphi = grid.inner_h(dphi, dphi)
        a_mu = ops.apply_a(state.mu, state.mu)
        xi_h = grid.inner_h(state.xi_lambda, state.xi_lambda)

        int_v_v0 = last.int_v_v0 + dt * last.inst_v_v0
        int_env_bulk = last.int_env_bulk + dt * last.inst_env_bulk
        int_env_surf = last.int_env_surf + dt * last.inst_env_surf
        int_dphi_h = last.int_dphi_h + dt * last.inst_dphi_h
        int_rate_h = last.int_rate_h + dt * grid.inner_h(delta, delta)
        int_rate_star = last.int_rate_star + dt * star_d
        int_mu_v0 = last.int_mu_v0 + dt * a_mu
        int_beta_h = last.int_beta_h + dt * xi_h

        rec = EstimateRecord(
            step=last.step + 1,
            t=state.t,
            weak_norm=lam * grid.inner_h(v, v) + star_v,
            energy_integral=0.5 * eps * int_v_v0 + 2.0 * int_env_bulk
                            + 2.0 * int_env_surf,
            rate_energy=2.0 * lam * int_rate_h + int_rate_star + eps * inst_v_v0
                        + 2.0 * env_b + 2.0 * env_s,
            potential_flux=int_mu_v0,
            state_h=grid.inner_h(state.u, state.u),
            viscous_regularity=lam * inst_v_v0 + eps * int_dphi_h,
            potential_grad=int_mu_v0,
            nonlinear_h=int_beta_h,
            mass_drift=abs(grid.mean(state.u) - cfg.m0),
            newton_iters=state.newton_iters,
            newton_residual=state.newton_residual,
            int_v_v0=int_v_v0,
            int_env_bulk=int_env_bulk,
            int_env_surf=int_env_surf,
            int_rate_h=int_rate_h,
            int_rate_star=int_rate_star,
            int_mu_v0=int_mu_v0,
            int_dphi_h=int_dphi_h,
            int_beta_h=int_beta_h,
            inst_v_v0=inst_v_v0,
            inst_env_bulk=env_b,
            inst_env_surf=env_s,
            inst_dphi_h=inst_dphi,
        )
        self._append(rec)

    def _append(self, rec: EstimateRecord):
        for name in ESTIMATE_COLUMNS[2:11]:
            if not np.isfinite(getattr(rec, name)):
                raise NumericsError(
                    f"estimate '{name}' is not finite at step {rec.step}")
        self.records.append(rec)


def discrete_energy(ops: OperatorSet, graph, pi, eps: float, lam: float,
                    v, m0: float) -> float:
    """The per-step Lyapunov functional of the source-free flow:
    eps*a(v,v)/2 + combined integral of env(u) + eps * integral of
    the pi antiderivative at u."""
    grid = ops.grid
    u = v + m0
    env_b, env_s = grid.l1_potential(graph, lam, u)
    prim = np.asarray(pi.primitive(u))
    pi_int = grid.integrate_bulk(prim) + grid.integrate_surface(prim)
    return 0.5 * eps * ops.apply_a(v, v) + env_b + env_s + eps * pi_int


# ---------------------------------------------------------------------------
# weak-form residual of the target problem
# ---------------------------------------------------------------------------


def basis_fields(grid: StripGrid):
    """24 fixed test fields: 8 low Fourier modes in x times {1, eta, eta^2}."""
    X, Y = grid.meshes()
    eta = Y / grid.height
    xs = [np.ones_like(X)]
    for k in (1, 2, 3):
        xs.append(np.cos(2.0 * np.pi * k * X / grid.width))
        xs.append(np.sin(2.0 * np.pi * k * X / grid.width))
    xs.append(np.cos(2.0 * np.pi * 4 * X / grid.width))
    ys = [np.ones_like(eta), eta, eta ** 2]
    return [fx * fy for fx in xs for fy in ys]


def weak_residual(ops: OperatorSet, traj: Trajectory, g=None) -> float:
    """Max over steps and test fields of the scaled weak-form defect

        | (du/dt, z)_H + a(beta_lam(u), z) - (g, z)_H | / |z|_V,

    evaluated with the run's own backward differences.  This measures how
    far the regularized trajectory is from solving the limit problem.
    """
    if traj.history_u is None:
        raise ValueError("weak_residual needs a trajectory with stored history")
    grid, graph = ops.grid, traj.graph
    lam, dt = traj.config.lam, traj.config.dt
    g = traj.g if g is None else grid.check_field(g)

    basis = basis_fields(grid)
    Z = np.stack([z.ravel() for z in basis], axis=1)
    MZ = ops.mass[:, None] * Z
    AZ = ops.stiffness @ Z
    norms = np.array([
        np.sqrt(grid.inner_h(z, z) + ops.apply_a(z, z)) for z in basis])
    g_term = g.ravel() @ MZ

    worst = 0.0
    for n in range(1, len(traj.history_u)):
        du = (traj.history_u[n] - traj.history_u[n - 1]).ravel() / dt
        xi = np.asarray(beta_value(graph, lam, traj.history_u[n])).ravel()
        res = du @ MZ + xi @ AZ - g_term
        worst = max(worst, float(np.max(np.abs(res) / norms)))
    return worst


# ---------------------------------------------------------------------------
# cascade studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CascadeMember:
    eps: float
    lam: float
    dt: float
    nx: int
    ny: int


@dataclass
class _MemberResult:
    member: CascadeMember
    ops: OperatorSet
    terminal: EstimateRecord
    weak_res: float
    snapshots: list
    newton_max: int
    mass_drift_max: float


@dataclass
class CascadeReport:
    members: list
    terminals: list
    weak_residuals: list
    cauchy_h: list           # length len(members)-1, projected H-norm
    cauchy_v0star: list      # same, dual norm
    lambda_uniformity: dict  # eps -> {field: max/min ratio}
    eps_uniformity: dict     # field -> ratio over members with eps <= eps0
    scaled_ratios: dict      # field -> ratio of field/(1+lam/eps)
    snapshot_times: list
    mass_drift_max: float

    def to_dict(self) -> dict:
        return {
            "members": [
                {"eps": m.eps, "lam": m.lam, "dt": m.dt, "nx": m.nx, "ny": m.ny}
                for m in self.members
            ],
            "terminals": [
                None if rec is None else
                {name: getattr(rec, name) for name in ESTIMATE_COLUMNS[2:11]}
                for rec in self.terminals
            ],
            "weak_residuals": self.weak_residuals,
            "cauchy_h": self.cauchy_h,
            "cauchy_v0star": self.cauchy_v0star,
            "lambda_uniformity": {repr(k): v for k, v in self.lambda_uniformity.items()},
            "eps_uniformity": self.eps_uniformity,
            "scaled_ratios": self.scaled_ratios,
            "snapshot_times": self.snapshot_times,
            "mass_drift_max": self.mass_drift_max,
        }

    def summary_table(self) -> str:
        head = ["member", "eps", "lam", "dt", "grid", "weak_norm", "rate_energy",
                "state_h", "weak_residual"]
        lines = ["  ".join(f"{h:>13}" for h in head)]
        for i, (m, rec, wr) in enumerate(
                zip(self.members, self.terminals, self.weak_residuals)):
            row = [str(i), f"{m.eps:g}", f"{m.lam:g}", f"{m.dt:g}",
                   f"{m.nx}x{m.ny}"]
            if rec is None:
                row += ["-", "-", "-"]
            else:
                row += [f"{rec.weak_norm:.6g}", f"{rec.rate_energy:.6g}",
                        f"{rec.state_h:.6g}"]
            row.append(f"{wr:.6g}")
            lines.append("  ".join(f"{c:>13}" for c in row))
        return "\n".join(lines)


def _ratio(values):
    vmax = max(values)
    vmin = min(values)
    if vmax <= 1e-300:
        return 1.0
    if vmin <= 0.0:
        return float("inf")
    return vmax / vmin


def _restrict(u_fine, shape_fine, shape_coarse):
    nxf, nyf = shape_fine
    nxc, nyc = shape_coarse
    if nxf % nxc or (nyf - 1) % (nyc - 1):
        raise ValueError(f"grids {shape_fine} and {shape_coarse} are not nested")
    return u_fine[:: nxf // nxc, :: (nyf - 1) // (nyc - 1)]


def _cauchy_pair(res_a: _MemberResult, res_b: _MemberResult):
    """Max-over-snapshots distance between consecutive members, measured on
    the coarser member's grid in the projected H and dual norms."""
    sa, sb = res_a.member, res_b.member
    if (sa.nx, sa.ny) == (sb.nx, sb.ny):
        coarse, au, bu = res_a, res_a.snapshots, res_b.snapshots
    elif sb.nx % sa.nx == 0 and (sb.ny - 1) % (sa.ny - 1) == 0:
        coarse = res_a
        au = res_a.snapshots
        bu = [(t, _restrict(u, (sb.nx, sb.ny), (sa.nx, sa.ny)))
              for t, u in res_b.snapshots]
    elif sa.nx % sb.nx == 0 and (sa.ny - 1) % (sb.ny - 1) == 0:
        coarse = res_b
        au = [(t, _restrict(u, (sa.nx, sa.ny), (sb.nx, sb.ny)))
              for t, u in res_a.snapshots]
        bu = res_b.snapshots
    else:
        raise ValueError("cascade members must live on nested grids")
    grid = coarse.ops.grid
    worst_h = 0.0
    worst_star = 0.0
    for (ta, ua), (tb, ub) in zip(au, bu):
        if abs(ta - tb) > 1e-9 * max(1.0, abs(ta)):
            raise ValueError("cascade members disagree on snapshot times")
        if ta == 0.0:
            continue
        w = grid.project(ua - ub)
        worst_h = max(worst_h, grid.norm_h(w))
        worst_star = max(worst_star, coarse.ops.norm_v0star(w))
    return worst_h, worst_star


def _run_member(member: CascadeMember, graph, pi, make_initial, make_source,
                horizon, width, height, snap_times, newton_tol, newton_max,
                record_estimates):
    grid = StripGrid(member.nx, member.ny, width, height)
    ops = OperatorSet(grid)
    cfg = SolverConfig(
        epsilon=member.eps, lam=member.lam, dt=member.dt, horizon=horizon,
        newton_tol=newton_tol, newton_max=newton_max,
        store_history=True, snapshot_times=tuple(snap_times))
    recorder = EstimateRecorder() if record_estimates else None
    traj = dynamics.run(ops, graph, pi, make_source(grid), make_initial(grid),
                        cfg, recorder)
    wres = weak_residual(ops, traj)
    records = recorder.records if recorder is not None else []
    result = _MemberResult(
        member=member,
        ops=ops,
        terminal=records[-1] if records else None,
        weak_res=wres,
        snapshots=traj.snapshots,
        newton_max=max(traj.newton_iters, default=0),
        mass_drift_max=traj.mass_drift_max,
    )
    return result, records, traj


def max_threads(requested=None) -> int:
    """Thread cap: explicit argument, else DPL_THREADS, else cpu count."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("DPL_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def cascade_study(graph: MonotoneGraph, pi: PiFunction, make_initial, make_source,
                  horizon: float, members, *, width: float = 1.0,
                  height: float = 1.0, snapshot_count: int = 5,
                  newton_tol: float = 1e-10, newton_max: int = 50,
                  threads=None, require_lambda_square: bool = True,
                  keep_records: bool = False, record_estimates: bool = True):
    """Run every (eps, lam, dt, grid) member and assemble the report.

    Members execute concurrently (capped by ``threads`` / DPL_THREADS); the
    report is a deterministic reduction ordered by schedule index.  With
    ``keep_records`` the full per-member estimate streams are returned as a
    second value.
    """
    members = list(members)
    if not members:
        raise ValueError("cascade schedule is empty")
    for m in members:
        if require_lambda_square and m.lam > m.eps ** 2 + 1e-15:
            raise ValueError(
                f"cascade member (eps={m.eps}, lam={m.lam}) violates lam <= eps^2; "
                "pass require_lambda_square=False to allow it")
    snap_times = [horizon * k / snapshot_count for k in range(1, snapshot_count + 1)]

    nthreads = min(max_threads(threads), len(members))
    if nthreads > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            outputs = list(pool.map(
                lambda m: _run_member(m, graph, pi, make_initial, make_source,
                                      horizon, width, height, snap_times,
                                      newton_tol, newton_max, record_estimates),
                members))
    else:
        outputs = [_run_member(m, graph, pi, make_initial, make_source, horizon,
                               width, height, snap_times, newton_tol, newton_max,
                               record_estimates)
                   for m in members]
    results = [out[0] for out in outputs]
    all_records = [out[1] for out in outputs]

    cauchy_h, cauchy_star = [], []
    for a, b in zip(results, results[1:]):
        ch, cs = _cauchy_pair(a, b)
        cauchy_h.append(ch)
        cauchy_star.append(cs)

    lambda_uniformity = {}
    eps_uniformity = {}
    scaled_ratios = {}
    if record_estimates:
        by_eps = {}
        for res in results:
            by_eps.setdefault(res.member.eps, []).append(res)
        lambda_uniformity = {
            eps: {name: _ratio([getattr(r.terminal, name) for r in group])
                  for name in UNIFORM_FIELDS}
            for eps, group in by_eps.items()
        }
        e0 = epsilon0(pi)
        eligible = [r for r in results if r.member.eps <= e0]
        if eligible:
            eps_uniformity = {
                name: _ratio([getattr(r.terminal, name) for r in eligible])
                for name in UNIFORM_FIELDS
            }
        positive = [r for r in results if r.member.eps > 0]
        if positive:
            scaled_ratios = {
                name: _ratio([getattr(r.terminal, name)
                              / (1.0 + r.member.lam / r.member.eps)
                              for r in positive])
                for name in SCALED_FIELDS
            }

    report = CascadeReport(
        members=[r.member for r in results],
        terminals=[r.terminal for r in results],
        weak_residuals=[r.weak_res for r in results],
        cauchy_h=cauchy_h,
        cauchy_v0star=cauchy_star,
        lambda_uniformity=lambda_uniformity,
        eps_uniformity=eps_uniformity,
        scaled_ratios=scaled_ratios,
        snapshot_times=snap_times,
        mass_drift_max=max(r.mass_drift_max for r in results),
    )
    if keep_records:
        return report, all_records
    return report

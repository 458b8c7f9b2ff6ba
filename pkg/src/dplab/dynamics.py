"""Implicit-Euler time integration of the regularized bulk-surface flow.

Each step advances the mean-free state v and the chemical potential mu of

    mass * (v+ - v)/dt + A mu+ = 0,
    mu+ = lam*(v+ - v)/dt + eps*mass^{-1} A v+ + beta_lam(u+) + eps*pi(u+) - f,
    u+ = v+ + m0,

a coupled nonlinear system solved by a semismooth Newton iteration on the
stacked unknown (v+, mu+) with a residual-monotone halving line search.
Because A annihilates constants, the combined mean of u is conserved
exactly (up to solver rounding) at every step.

lam = 0 and eps = 0 are admitted for graphs whose beta is single-valued
with locally Lipschitz slope; beta_lam then degenerates to beta itself and
the stepper integrates the limit problem directly.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .geometry import StripGrid
from .graphs import MonotoneGraph, PiFunction, epsilon0
from .operators import LinearSolveError, OperatorSet

__all__ = [
    "SolverConfig",
    "State",
    "Trajectory",
    "NewtonDivergedError",
    "CompatibilityError",
    "NumericsError",
    "step",
    "run",
    "beta_value",
]

LINESEARCH_FLOOR = 2.0 ** -20


class NewtonDivergedError(RuntimeError):
    """Newton failed to reduce the residual; carries the last residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class CompatibilityError(ValueError):
    """Initial datum violates the admissibility assumptions."""


class NumericsError(RuntimeError):
    """A non-finite value appeared during a run."""


@dataclass
class SolverConfig:
    """Regularization parameters and stepping controls for one run."""

    epsilon: float
    lam: float
    dt: float
    horizon: float
    newton_tol: float = 1e-10
    newton_max: int = 50
    store_history: bool = True
    snapshot_times: tuple = ()
    m0: float | None = None  # filled in by run() from the initial datum

    def validate(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in [0, 1]")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must lie in [0, 1]")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.newton_tol <= 0 or self.newton_max < 1:
            raise ValueError("newton controls must be positive")

    def steps(self) -> int:
        ratio = self.horizon / self.dt
        n = round(ratio)
        if abs(ratio - n) < 1e-9:
            return max(int(n), 1)
        return max(int(math.ceil(ratio)), 1)


@dataclass
class State:
    """One accepted time level: v mean-free, u = v + m0, mu, beta_lam(u)."""

    t: float
    v: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    xi_lambda: np.ndarray
    newton_iters: int = 0
    newton_residual: float = 0.0


@dataclass
class Trajectory:
    """Everything a run produced, plus the data it was produced from."""

    config: SolverConfig
    grid: StripGrid
    graph: MonotoneGraph
    pi: PiFunction
    m0: float
    g: np.ndarray
    f: np.ndarray
    times: list
    snapshots: list          # [(t, u array)] at configured times plus final
    history_u: list | None   # u at every step (index 0 = initial) if stored
    final: State
    newton_iters: list
    newton_residual_max: float
    mass_drift_max: float
    wall_time: float
    records: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "steps": len(self.times) - 1,
            "final_t": self.times[-1],
            "m0": self.m0,
            "mass_drift_max": self.mass_drift_max,
            "newton": {
                "max_iters": max(self.newton_iters, default=0),
                "total_iters": int(sum(self.newton_iters)),
                "max_residual": self.newton_residual_max,
            },
            "final_norms": {
                "u_h": self.grid.norm_h(self.final.u),
                "v_h": self.grid.norm_h(self.final.v),
            },
            "wall_time_s": self.wall_time,
        }


def beta_value(graph: MonotoneGraph, lam: float, u):
    """beta_lam(u) for lam > 0, beta(u) for the lam = 0 limit."""
    return graph.yosida(lam, u) if lam > 0 else graph.beta(u)


def _beta_slope(graph, lam, u):
    return graph.yosida_derivative(lam, u) if lam > 0 else graph.beta_derivative(u)


class _NewtonWorkspace:
    """Per-run factorization cache for the stacked Newton matrix."""

    def __init__(self, ops: OperatorSet, cfg: SolverConfig):
        n = ops.n
        mass = sparse.diags(ops.mass)
        self.j11 = (1.0 / cfg.dt) * mass
        self.j12 = ops.stiffness
        self.j21_base = (-(cfg.lam / cfg.dt)) * mass - cfg.epsilon * ops.stiffness
        self.j22 = mass
        self.mass_vec = ops.mass
        self.n = n
        self._diag = None
        self._lu = None

    def solve(self, diag_c, r1, r2):
        """Solve the stacked Jacobian system for (-r1, -r2)."""
        if self._lu is None or not np.array_equal(diag_c, self._diag):
            j21 = self.j21_base - sparse.diags(self.mass_vec * diag_c)
            jac = sparse.bmat([[self.j11, self.j12], [j21, self.j22]], format="csc")
            try:
                self._lu = spla.splu(jac)
            except RuntimeError as exc:
                raise LinearSolveError(f"Newton matrix factorization failed: {exc}")
            self._diag = diag_c.copy()
        rhs = np.concatenate([-r1, -r2])
        sol = self._lu.solve(rhs)
        if not np.isfinite(sol).all():
            raise LinearSolveError("Newton linear solve produced non-finite values")
        return sol[: self.n], sol[self.n:]


def step(ops: OperatorSet, graph: MonotoneGraph, pi: PiFunction, f, cfg: SolverConfig,
         state: State, workspace: _NewtonWorkspace | None = None) -> State:
    """Advance one implicit-Euler step; returns the new accepted state.

    Raises NewtonDivergedError when the residual cannot be reduced below
    ``cfg.newton_tol`` within ``cfg.newton_max`` iterations (the caller
    should halve dt), and LinearSolveError on factorization defects.
    """
    if cfg.m0 is None:
        raise ValueError("config.m0 is unset; step must be driven through run()")
    if workspace is None:
        workspace = _NewtonWorkspace(ops, cfg)
    grid = ops.grid
    mass = ops.mass
    A = ops.stiffness
    dt, lam, eps, m0 = cfg.dt, cfg.lam, cfg.epsilon, cfg.m0

    vn = state.v.ravel()
    f_flat = f.ravel()
    x_v = vn.copy()
    x_mu = state.mu.ravel().copy()

    def residual(xv, xmu):
        delta = (xv - vn) / dt
        u = xv + m0
        bval = np.asarray(beta_value(graph, lam, u)).ravel()
        r1 = mass * delta + A @ xmu
        r2 = mass * (xmu - lam * delta - bval - eps * np.asarray(pi.value(u)).ravel()
                     + f_flat) - eps * (A @ xv)
        rho = math.sqrt(float((r1 * r1 / mass).sum() + (r2 * r2 / mass).sum()))
        return r1, r2, rho

    r1, r2, rho = residual(x_v, x_mu)
    iters = 0
    while rho > cfg.newton_tol:
        if iters >= cfg.newton_max:
            raise NewtonDivergedError(
                f"Newton did not converge in {cfg.newton_max} iterations "
                f"(residual {rho:.3e})", rho)
        u = x_v + m0
        diag_c = (np.asarray(_beta_slope(graph, lam, u)).ravel()
                  + eps * np.asarray(pi.derivative(u)).ravel())
        dv, dmu = workspace.solve(diag_c, r1, r2)
        alpha = 1.0
        while True:
            t1, t2, trial = residual(x_v + alpha * dv, x_mu + alpha * dmu)
            if trial < rho:
                x_v = x_v + alpha * dv
                x_mu = x_mu + alpha * dmu
                r1, r2, rho = t1, t2, trial
                break
            alpha *= 0.5
            if alpha < LINESEARCH_FLOOR:
                raise NewtonDivergedError(
                    f"Newton line search stalled at residual {rho:.3e}", rho)
        iters += 1

    u_new = (x_v + m0).reshape(grid.shape)
    return State(
        t=state.t + dt,
        v=x_v.reshape(grid.shape),
        u=u_new,
        mu=x_mu.reshape(grid.shape),
        xi_lambda=np.asarray(beta_value(graph, lam, u_new)),
        newton_iters=iters,
        newton_residual=rho,
    )


def _check_admissible(grid, graph, g, u0, eps, lam, monitored, pi):
    scale = max(1.0, float(np.abs(g).max(initial=0.0)))
    gm = grid.mean(g)
    if abs(gm) > 1e-10 * scale:
        raise ValueError(f"(A2): source mean {gm:.3e} must vanish")
    if (lam == 0.0 or eps == 0.0) and not graph.allows_lambda_zero:
        raise ValueError(
            f"graph '{graph.kind}' requires lam > 0 and eps > 0 "
            "(beta is not locally Lipschitz)")
    e0 = epsilon0(pi)
    if eps > e0:
        msg = (f"epsilon = {eps} exceeds the admissible threshold "
               f"epsilon0 = {e0} for pi '{pi.kind}'")
        if monitored:
            raise ValueError(msg + "; estimate monitoring requires eps <= epsilon0")
        warnings.warn(msg, stacklevel=3)
    m0 = grid.mean(u0)
    lo, hi = graph.domain
    if not (lo < m0 < hi):
        raise CompatibilityError(
            f"(A3): m0 = {m0:g} not interior to D(beta) = [{lo:g}, {hi:g}]")
    pot = np.asarray(graph.potential(u0))
    if not np.isfinite(pot).all():
        bad = int((~np.isfinite(pot)).sum())
        raise CompatibilityError(
            f"(A3): potential of the initial datum is not summable "
            f"({bad} nodes outside D(beta) = [{lo:g}, {hi:g}])")
    return m0


def run(ops: OperatorSet, graph: MonotoneGraph, pi: PiFunction, g, u0,
        config: SolverConfig, recorder=None) -> Trajectory:
    """Integrate from u0 over the full horizon; returns the trajectory.

    ``g`` is a time-independent mean-zero source, lifted once into the
    potential offset f.  ``recorder``, when given, receives
    ``start(ops, graph, config, state0)`` and ``on_step(prev, state)``
    callbacks and its ``records`` list is attached to the trajectory.
    """
    t_begin = time.perf_counter()
    config.validate()
    grid = ops.grid
    g = grid.check_field(g)
    u0 = grid.check_field(u0)
    m0 = _check_admissible(grid, graph, g, u0, config.epsilon, config.lam,
                           recorder is not None, pi)
    cfg = replace(config, m0=m0)

    f = ops.lift_source(g) if np.any(g) else grid.zeros()
    v0 = ops.regularize_initial(u0, cfg.epsilon)
    u_init = v0 + m0
    xi0 = np.asarray(beta_value(graph, cfg.lam, u_init))
    mu0 = (cfg.epsilon * ops.apply_subdiff_phi(v0) + xi0
           + cfg.epsilon * np.asarray(pi.value(u_init)) - f)
    state = State(0.0, v0, u_init, mu0, xi0)

    nsteps = cfg.steps()
    snap_steps = {}
    for ts in cfg.snapshot_times:
        k = round(ts / cfg.dt)
        if not (1 <= k <= nsteps) or abs(k * cfg.dt - ts) > 1e-9 * max(1.0, ts):
            raise ValueError(f"snapshot time {ts} is not a step multiple of dt={cfg.dt}")
        snap_steps[k] = ts

    if recorder is not None:
        recorder.start(ops, graph, cfg, state)

    times = [0.0]
    snapshots = [(0.0, u_init.copy())]
    history = [u_init.copy()] if cfg.store_history else None
    newton_iters = []
    drift_max = 0.0
    resid_max = 0.0
    workspace = _NewtonWorkspace(ops, cfg)

    for n in range(1, nsteps + 1):
        prev = state
        state = step(ops, graph, pi, f, cfg, prev, workspace)
        state.t = n * cfg.dt
        if not (np.isfinite(state.v).all() and np.isfinite(state.mu).all()):
            raise NumericsError(f"non-finite state at step {n} (t={state.t:g})")
        times.append(state.t)
        newton_iters.append(state.newton_iters)
        resid_max = max(resid_max, state.newton_residual)
        drift_max = max(drift_max, abs(grid.mean(state.u) - m0))
        if recorder is not None:
            recorder.on_step(prev, state)
        if history is not None:
            history.append(state.u.copy())
        if n in snap_steps:
            snapshots.append((state.t, state.u.copy()))

    if snapshots[-1][0] != times[-1]:
        snapshots.append((times[-1], state.u.copy()))

    return Trajectory(
        config=cfg,
        grid=grid,
        graph=graph,
        pi=pi,
        m0=m0,
        g=g,
        f=f,
        times=times,
        snapshots=snapshots,
        history_u=history,
        final=state,
        newton_iters=newton_iters,
        newton_residual_max=resid_max,
        mass_drift_max=drift_max,
        wall_time=time.perf_counter() - t_begin,
        records=list(getattr(recorder, "records", [])) if recorder is not None else [],
    )

"""Configuration parsing, experiment presets, and the command-line driver.

Configs are INI files with sections [graph], [pi], [grid], [time],
[regularization], [initial], [source], [output], [cascade].  CLI flags
override file keys.  Subcommands: run, cascade, check, presets.  Exit
codes: 0 success, 1 rejected input, 2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diagnostics, dynamics, geometry, graphs, operators
from .diagnostics import (CascadeMember, ESTIMATE_COLUMNS, EstimateRecorder,
                          cascade_study, discrete_energy, weak_residual)
from .dynamics import CompatibilityError, SolverConfig
from .geometry import StripGrid, field_for_grid, save_field
from .operators import OperatorSet

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "presets", "main", "entry"]


class ConfigError(ValueError):
    """Invalid configuration text or values."""


# keys admitted per section (profile parameters are checked separately)
_SCHEMA = {
    "graph": {"kind", "k_solid", "k_liquid", "latent", "exponent"},
    "pi": {"kind", "latent"},
    "grid": {"nx", "ny", "width", "height"},
    "time": {"dt", "horizon"},
    "regularization": {"epsilon", "lam", "newton_tol", "newton_max"},
    "initial": {"profile", "value", "offset", "amplitude", "mode", "low", "high", "path"},
    "source": {"profile", "offset", "amplitude", "mode", "path"},
    "output": {"directory", "seed", "snapshots"},
    "cascade": {"members", "require_lambda_square"},
}

_PROFILE_PARAMS = {
    "constant": {"value"},
    "x_mode": {"offset", "amplitude", "mode"},
    "y_ramp": {"offset", "amplitude"},
    "two_phase": {"low", "high"},
    "csv": {"path"},
    "zero": set(),
}


@dataclass
class ExperimentConfig:
    graph_kind: str = "identity"
    graph_params: dict = field(default_factory=dict)
    pi_kind: str = "zero"
    pi_params: dict = field(default_factory=dict)
    nx: int = 32
    ny: int = 17
    width: float = 1.0
    height: float = 1.0
    dt: float = 0.002
    horizon: float = 0.1
    epsilon: float = 0.1
    lam: float = 0.01
    newton_tol: float = 1e-10
    newton_max: int = 50
    initial_profile: str = "constant"
    initial_params: dict = field(default_factory=dict)
    source_profile: str = "zero"
    source_params: dict = field(default_factory=dict)
    output_dir: str = "out"
    seed: int = 0
    snapshots: int = 5
    cascade_members: tuple = ()
    require_lambda_square: bool = True

    def to_text(self) -> str:
        out = io.StringIO()

        def sec(name, pairs):
            out.write(f"[{name}]\n")
            for k, v in pairs:
                out.write(f"{k} = {v}\n")
            out.write("\n")

        def fmt(v):
            return repr(v) if isinstance(v, float) else str(v)

        sec("graph", [("kind", self.graph_kind)]
            + sorted((k, fmt(v)) for k, v in self.graph_params.items()))
        sec("pi", [("kind", self.pi_kind)]
            + sorted((k, fmt(v)) for k, v in self.pi_params.items()))
        sec("grid", [("nx", self.nx), ("ny", self.ny),
                     ("width", fmt(self.width)), ("height", fmt(self.height))])
        sec("time", [("dt", fmt(self.dt)), ("horizon", fmt(self.horizon))])
        sec("regularization", [("epsilon", fmt(self.epsilon)), ("lam", fmt(self.lam)),
                               ("newton_tol", fmt(self.newton_tol)),
                               ("newton_max", self.newton_max)])
        sec("initial", [("profile", self.initial_profile)]
            + sorted((k, fmt(v)) for k, v in self.initial_params.items()))
        sec("source", [("profile", self.source_profile)]
            + sorted((k, fmt(v)) for k, v in self.source_params.items()))
        sec("output", [("directory", self.output_dir), ("seed", self.seed),
                       ("snapshots", self.snapshots)])
        if self.cascade_members:
            members = " ; ".join(
                f"{m.eps!r},{m.lam!r},{m.dt!r},{m.nx},{m.ny}"
                for m in self.cascade_members)
            sec("cascade", [("members", members),
                            ("require_lambda_square", self.require_lambda_square)])
        return out.getvalue()


def _parse_profile_params(section, name, profile, parser_section):
    allowed = _PROFILE_PARAMS.get(profile)
    if allowed is None:
        known = ", ".join(sorted(_PROFILE_PARAMS))
        raise ConfigError(f"[{section}] unknown profile '{profile}' (known: {known})")
    params = {}
    for key, raw in parser_section.items():
        if key == "profile":
            continue
        if key not in allowed:
            raise ConfigError(f"[{section}] key '{key}' is not a parameter of "
                              f"profile '{profile}'")
        if key == "path":
            params[key] = raw
        elif key == "mode":
            params[key] = int(raw)
        else:
            params[key] = float(raw)
    return params


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate INI text into an ExperimentConfig.

    Syntax errors carry line numbers; semantic violations of the input
    assumptions are reported with the assumption label, e.g.
    "(A3): m0 = 1.0 not interior to D(beta) = [0, 1]".
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno}: {exc.message}")
    except configparser.ParsingError as exc:
        lines = ", ".join(str(err[0]) for err in exc.errors)
        raise ConfigError(f"syntax error at line(s) {lines}")

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"[{section}] unknown key '{key}'")

    cfg = ExperimentConfig()
    try:
        if parser.has_section("graph"):
            sec = parser["graph"]
            cfg.graph_kind = sec.get("kind", cfg.graph_kind)
            cfg.graph_params = {k: float(v) for k, v in sec.items() if k != "kind"}
        if parser.has_section("pi"):
            sec = parser["pi"]
            cfg.pi_kind = sec.get("kind", cfg.pi_kind)
            cfg.pi_params = {k: float(v) for k, v in sec.items() if k != "kind"}
        if parser.has_section("grid"):
            sec = parser["grid"]
            cfg.nx = sec.getint("nx", cfg.nx)
            cfg.ny = sec.getint("ny", cfg.ny)
            cfg.width = sec.getfloat("width", cfg.width)
            cfg.height = sec.getfloat("height", cfg.height)
        if parser.has_section("time"):
            sec = parser["time"]
            cfg.dt = sec.getfloat("dt", cfg.dt)
            cfg.horizon = sec.getfloat("horizon", cfg.horizon)
        if parser.has_section("regularization"):
            sec = parser["regularization"]
            cfg.epsilon = sec.getfloat("epsilon", cfg.epsilon)
            cfg.lam = sec.getfloat("lam", cfg.lam)
            cfg.newton_tol = sec.getfloat("newton_tol", cfg.newton_tol)
            cfg.newton_max = sec.getint("newton_max", cfg.newton_max)
        if parser.has_section("initial"):
            sec = parser["initial"]
            cfg.initial_profile = sec.get("profile", cfg.initial_profile)
            cfg.initial_params = _parse_profile_params(
                "initial", "initial", cfg.initial_profile, sec)
        if parser.has_section("source"):
            sec = parser["source"]
            cfg.source_profile = sec.get("profile", cfg.source_profile)
            cfg.source_params = _parse_profile_params(
                "source", "source", cfg.source_profile, sec)
        if parser.has_section("output"):
            sec = parser["output"]
            cfg.output_dir = sec.get("directory", cfg.output_dir)
            cfg.seed = sec.getint("seed", cfg.seed)
            cfg.snapshots = sec.getint("snapshots", cfg.snapshots)
        if parser.has_section("cascade"):
            sec = parser["cascade"]
            cfg.require_lambda_square = sec.getboolean(
                "require_lambda_square", cfg.require_lambda_square)
            raw = sec.get("members", "").strip()
            members = []
            for chunk in filter(None, (c.strip() for c in raw.split(";"))):
                parts = [p.strip() for p in chunk.split(",")]
                if len(parts) != 5:
                    raise ConfigError(
                        f"[cascade] member '{chunk}' must be eps,lam,dt,nx,ny")
                members.append(CascadeMember(
                    eps=float(parts[0]), lam=float(parts[1]), dt=float(parts[2]),
                    nx=int(parts[3]), ny=int(parts[4])))
            cfg.cascade_members = tuple(members)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid value: {exc}")

    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    """Eager semantic checks: catalog names, grid sanity, admissibility."""
    try:
        graph = graphs.make_graph(cfg.graph_kind, cfg.graph_params)
        graphs.make_pi(cfg.pi_kind, cfg.pi_params)
    except ValueError as exc:
        raise ConfigError(str(exc))
    if cfg.initial_profile not in _PROFILE_PARAMS or cfg.initial_profile == "zero":
        raise ConfigError(f"[initial] unknown profile '{cfg.initial_profile}'")
    if cfg.source_profile not in _PROFILE_PARAMS or cfg.source_profile == "two_phase":
        raise ConfigError(f"[source] unknown profile '{cfg.source_profile}'")
    try:
        grid = StripGrid(cfg.nx, cfg.ny, cfg.width, cfg.height)
        solver_config(cfg).validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    if cfg.initial_profile != "csv":
        u0 = make_initial(cfg, grid)
        m0 = grid.mean(u0)
        lo, hi = graph.domain
        if not (lo < m0 < hi):
            raise ConfigError(
                f"(A3): m0 = {m0:g} not interior to D(beta) = [{lo:g}, {hi:g}]")
        if not np.isfinite(np.asarray(graph.potential(u0))).all():
            raise ConfigError(
                "(A3): initial datum leaves D(beta) = "
                f"[{lo:g}, {hi:g}] on a positive-measure set")


# -- field construction -------------------------------------------------------


def make_grid(cfg: ExperimentConfig) -> StripGrid:
    return StripGrid(cfg.nx, cfg.ny, cfg.width, cfg.height)


def _profile_field(grid: StripGrid, profile: str, params: dict):
    X, Y = grid.meshes()
    if profile == "constant":
        return np.full(grid.shape, params.get("value", 0.0))
    if profile == "x_mode":
        k = int(params.get("mode", 1))
        return (params.get("offset", 0.0)
                + params.get("amplitude", 1.0)
                * np.cos(2.0 * np.pi * k * X / grid.width))
    if profile == "y_ramp":
        return params.get("offset", 0.0) + params.get("amplitude", 1.0) * Y / grid.height
    if profile == "two_phase":
        lo = params.get("low", -0.5)
        hi = params.get("high", 1.5)
        return lo + (hi - lo) * 0.5 * (1.0 + np.cos(2.0 * np.pi * X / grid.width))
    if profile == "zero":
        return grid.zeros()
    if profile == "csv":
        return field_for_grid(grid, params["path"])
    raise ConfigError(f"unknown profile '{profile}'")


def make_initial(cfg: ExperimentConfig, grid: StripGrid):
    return _profile_field(grid, cfg.initial_profile, cfg.initial_params)


def make_source(cfg: ExperimentConfig, grid: StripGrid):
    """Source field, mean-projected; warns when projection actually moves it."""
    g = _profile_field(grid, cfg.source_profile, cfg.source_params)
    m = grid.mean(g)
    if abs(m) > 1e-12:
        print(f"warning: source profile has mean {m:.3e}; projecting to zero mean",
              file=sys.stderr)
    return g - m


def solver_config(cfg: ExperimentConfig) -> SolverConfig:
    snap = tuple(cfg.horizon * k / cfg.snapshots for k in range(1, cfg.snapshots + 1)) \
        if cfg.snapshots > 0 else ()
    return SolverConfig(
        epsilon=cfg.epsilon, lam=cfg.lam, dt=cfg.dt, horizon=cfg.horizon,
        newton_tol=cfg.newton_tol, newton_max=cfg.newton_max,
        snapshot_times=snap)


# -- presets -------------------------------------------------------------------


def presets() -> dict:
    """The built-in experiment table."""
    table = {}
    table["stefan"] = ExperimentConfig(
        graph_kind="stefan",
        graph_params={"k_solid": 1.0, "k_liquid": 1.0, "latent": 1.0},
        pi_kind="stefan", pi_params={"latent": 1.0},
        nx=64, ny=17, width=4.0, dt=0.005, horizon=0.5, epsilon=0.1, lam=0.01,
        initial_profile="two_phase", initial_params={"low": 0.0, "high": 1.0},
        output_dir="out/stefan")
    table["hele-shaw"] = ExperimentConfig(
        graph_kind="double_obstacle", pi_kind="neg_identity",
        nx=32, ny=17, dt=0.002, horizon=0.1, epsilon=0.1, lam=0.01,
        initial_profile="x_mode",
        initial_params={"offset": 0.5, "amplitude": 0.4, "mode": 1},
        output_dir="out/hele-shaw")
    table["porous-medium"] = ExperimentConfig(
        graph_kind="power_law", graph_params={"exponent": 2.0}, pi_kind="zero",
        nx=32, ny=17, dt=0.002, horizon=0.2, epsilon=0.1, lam=0.01,
        initial_profile="x_mode",
        initial_params={"offset": 1.0, "amplitude": 1.0, "mode": 1},
        output_dir="out/porous-medium")
    table["fast-diffusion"] = ExperimentConfig(
        graph_kind="power_law", graph_params={"exponent": 0.5}, pi_kind="zero",
        nx=32, ny=17, dt=0.002, horizon=0.2, epsilon=0.1, lam=0.01,
        initial_profile="x_mode",
        initial_params={"offset": 1.0, "amplitude": 0.5, "mode": 1},
        output_dir="out/fast-diffusion")
    table["heat"] = ExperimentConfig(
        graph_kind="identity", pi_kind="zero",
        nx=32, ny=17, dt=0.002, horizon=0.1, epsilon=0.0, lam=0.0,
        newton_tol=1e-8,
        initial_profile="x_mode",
        initial_params={"offset": 0.0, "amplitude": 1.0, "mode": 1},
        output_dir="out/heat")
    return table


# -- output writers --------------------------------------------------------------


def _write_estimates_csv(path, record_lists):
    """record_lists: [(member_index or None, records)]; deterministic bytes."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = list(ESTIMATE_COLUMNS)
        if any(idx is not None for idx, _ in record_lists):
            cols = ["member"] + cols
        fh.write(",".join(cols) + "\n")
        for idx, records in record_lists:
            prefix = "" if idx is None else f"{idx},"
            for rec in records:
                fh.write(prefix + rec.csv_row() + "\n")


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_echo(cfg: ExperimentConfig) -> dict:
    return {
        "graph": {"kind": cfg.graph_kind, **cfg.graph_params},
        "pi": {"kind": cfg.pi_kind, **cfg.pi_params},
        "grid": {"nx": cfg.nx, "ny": cfg.ny, "width": cfg.width, "height": cfg.height},
        "time": {"dt": cfg.dt, "horizon": cfg.horizon},
        "regularization": {"epsilon": cfg.epsilon, "lam": cfg.lam,
                           "newton_tol": cfg.newton_tol, "newton_max": cfg.newton_max},
        "initial": {"profile": cfg.initial_profile, **cfg.initial_params},
        "source": {"profile": cfg.source_profile, **cfg.source_params},
        "seed": cfg.seed,
    }


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> dict:
    grid = make_grid(cfg)
    ops = OperatorSet(grid)
    graph = graphs.make_graph(cfg.graph_kind, cfg.graph_params)
    pi = graphs.make_pi(cfg.pi_kind, cfg.pi_params)
    u0 = make_initial(cfg, grid)
    g = make_source(cfg, grid)
    scfg = solver_config(cfg)
    recorder = EstimateRecorder()
    traj = dynamics.run(ops, graph, pi, g, u0, scfg, recorder)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_estimates_csv(out_dir / "estimates.csv", [(None, recorder.records)])
    snap_dir = out_dir / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for t, u in traj.snapshots:
        save_field(snap_dir / f"u_t{t:.6f}.csv", grid, u)
    summary = {
        "config": _config_echo(cfg),
        **traj.summary(),
        "weak_residual": weak_residual(ops, traj),
        "energy_final": discrete_energy(ops, graph, pi, cfg.epsilon, cfg.lam,
                                        traj.final.v, traj.m0),
    }
    _write_json(out_dir / "summary.json", summary)
    return summary


def run_cascade(cfg: ExperimentConfig, out_dir: Path) -> dict:
    if not cfg.cascade_members:
        raise ConfigError("[cascade] members is required for the cascade command")
    graph = graphs.make_graph(cfg.graph_kind, cfg.graph_params)
    pi = graphs.make_pi(cfg.pi_kind, cfg.pi_params)
    report, all_records = cascade_study(
        graph, pi,
        lambda grid: make_initial(cfg, grid),
        lambda grid: make_source(cfg, grid),
        cfg.horizon, cfg.cascade_members,
        width=cfg.width, height=cfg.height,
        snapshot_count=cfg.snapshots if cfg.snapshots > 0 else 5,
        newton_tol=cfg.newton_tol, newton_max=cfg.newton_max,
        require_lambda_square=cfg.require_lambda_square,
        keep_records=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_estimates_csv(out_dir / "estimates.csv",
                         list(enumerate(all_records)))
    payload = {"config": _config_echo(cfg), **report.to_dict()}
    _write_json(out_dir / "report.json", payload)
    return {"report": report, "payload": payload}


# -- invariant battery (the `check` subcommand) -----------------------------------


def _check_battery(seed: int = 0):
    """Small-grid invariant suite; yields (name, passed, detail)."""
    rng = np.random.default_rng(seed)
    catalog = [graphs.Stefan(1.0, 1.0, 1.0), graphs.DoubleObstacle(),
               graphs.PowerLaw(2.0), graphs.Cubic(), graphs.Identity()]

    r = rng.uniform(-4.0, 4.0, size=2000)
    s = rng.uniform(-4.0, 4.0, size=2000)
    lam = rng.uniform(0.01, 1.0, size=2000)

    worst = 0.0
    for graph in catalog:
        lo, hi = np.minimum(r, s), np.maximum(r, s)
        gap = graph.yosida(0.5, lo) - graph.yosida(0.5, hi)
        worst = max(worst, float(gap.max()))
    yield "yosida monotonicity", worst <= 1e-12, f"max violation {worst:.2e}"

    worst = 0.0
    for graph in catalog:
        lhs = np.abs(np.asarray([graph.yosida(l, a) - graph.yosida(l, b)
                                 for l, a, b in zip(lam[:500], r[:500], s[:500])]))
        rhs = np.abs(r[:500] - s[:500]) / lam[:500]
        worst = max(worst, float((lhs - rhs).max()))
    yield "yosida 1/lam-Lipschitz", worst <= 1e-12, f"max excess {worst:.2e}"

    worst = 0.0
    for graph in catalog:
        env = np.asarray(graph.moreau_envelope(0.3, r))
        pot = np.asarray(graph.potential(r))
        mask = np.isfinite(pot)
        worst = max(worst, float((env[mask] - pot[mask]).max()), float((-env).max()))
    yield "0 <= envelope <= potential", worst <= 1e-12, f"max violation {worst:.2e}"

    grid = StripGrid(8, 5)
    ops = OperatorSet(grid)
    ok = abs(grid.inner_h(grid.constant(1.0), grid.constant(1.0))
             - grid.total_measure) <= 1e-12
    yield "measures |bulk|+|surface|", ok, f"total {grid.total_measure}"

    asym = abs(ops.stiffness - ops.stiffness.T).max()
    kernel = float(np.abs(ops.stiffness @ np.ones(ops.n)).max())
    yield "stiffness symmetric, kernel constants", asym == 0.0 and kernel <= 1e-13, \
        f"asym {asym:.1e}, kernel {kernel:.1e}"

    worst = 0.0
    for _ in range(20):
        v = grid.project(rng.standard_normal(grid.shape))
        z = rng.standard_normal(grid.shape)
        lhs = grid.inner_h(ops.apply_subdiff_phi(v), z)
        rhs = ops.apply_a(v, z)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
    yield "duality identity", worst <= 1e-11, f"max relative defect {worst:.2e}"

    worst = 0.0
    for _ in range(10):
        g = grid.project(rng.standard_normal(grid.shape))
        back = ops.apply_subdiff_phi(ops.lift_source(g))
        worst = max(worst, float(np.abs(back - g).max()))
    yield "source lifting round-trip", worst <= 1e-10, f"max defect {worst:.2e}"

    pre = presets()["stefan"]
    pre = replace(pre, nx=16, ny=9, horizon=0.05)
    grid2 = make_grid(pre)
    ops2 = OperatorSet(grid2)
    graph2 = graphs.make_graph(pre.graph_kind, pre.graph_params)
    pi2 = graphs.make_pi(pre.pi_kind, pre.pi_params)
    recorder = EstimateRecorder()
    traj = dynamics.run(ops2, graph2, pi2, grid2.zeros(), make_initial(pre, grid2),
                        solver_config(pre), recorder)
    yield "mass conservation (stefan, 10 steps)", traj.mass_drift_max <= 1e-11, \
        f"max drift {traj.mass_drift_max:.2e}"

    energies = [discrete_energy(ops2, graph2, pi2, pre.epsilon, pre.lam,
                                traj.snapshots[0][1] - traj.m0, traj.m0)]
    prev_v = None
    hist = traj.history_u
    for u in hist:
        energies.append(discrete_energy(ops2, graph2, pi2, pre.epsilon, pre.lam,
                                        u - traj.m0, traj.m0))
    rises = max(b - a for a, b in zip(energies, energies[1:]))
    yield "energy non-increasing (stefan, g = 0)", rises <= 10 * pre.newton_tol, \
        f"max rise {rises:.2e}"


def check_command(seed: int) -> int:
    failures = 0
    for name, ok, detail in _check_battery(seed):
        status = "PASS" if ok else "FAIL"
        print(f"{status}  {name}  [{detail}]")
        if not ok:
            failures += 1
    return 0 if failures == 0 else 1


# -- argument handling ---------------------------------------------------------


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.grid:
        try:
            nx, ny = args.grid.lower().split("x")
            cfg = replace(cfg, nx=int(nx), ny=int(ny))
        except ValueError:
            raise ConfigError(f"--grid expects NXxNY, got '{args.grid}'")
    if args.dt is not None:
        cfg = replace(cfg, dt=args.dt)
    if args.horizon is not None:
        cfg = replace(cfg, horizon=args.horizon)
    if args.eps is not None:
        cfg = replace(cfg, epsilon=args.eps)
    if args.lam is not None:
        cfg = replace(cfg, lam=args.lam)
    if args.output is not None:
        cfg = replace(cfg, output_dir=args.output)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    validate_config(cfg)
    return cfg


def _load_config(args) -> ExperimentConfig:
    if args.preset:
        table = presets()
        if args.preset not in table:
            raise ConfigError(f"unknown preset '{args.preset}' "
                              f"(known: {', '.join(sorted(table))})")
        cfg = table[args.preset]
    elif args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}")
        cfg = parse_config(text)
    else:
        raise ConfigError("either --preset or --config is required")
    return _apply_overrides(cfg, args)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dplab",
        description="Bulk-surface degenerate-diffusion laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--preset", help="name of a built-in experiment")
        p.add_argument("--config", help="path to an INI config file")
        p.add_argument("--grid", help="override grid as NXxNY")
        p.add_argument("--dt", type=float, help="override time step")
        p.add_argument("--horizon", "-T", type=float, help="override final time")
        p.add_argument("--eps", type=float, help="override epsilon")
        p.add_argument("--lam", type=float, help="override lambda")
        p.add_argument("--output", help="override output directory")
        p.add_argument("--seed", type=int, help="override the seed")

    add_common(sub.add_parser("run", help="run one simulation"))
    add_common(sub.add_parser("cascade", help="run a regularization schedule"))
    chk = sub.add_parser("check", help="run the small-grid invariant suite")
    chk.add_argument("--seed", type=int, default=0)
    sub.add_parser("presets", help="list built-in experiments")
    return ap


def main(argv) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "presets":
            for name in presets():
                print(name)
            return 0
        if args.command == "check":
            return check_command(args.seed)
        cfg = _load_config(args)
        out_dir = Path(cfg.output_dir)
        t0 = time.perf_counter()
        if args.command == "run":
            summary = run_experiment(cfg, out_dir)
            print(f"run finished: {summary['steps']} steps, "
                  f"mass drift {summary['mass_drift_max']:.2e}, "
                  f"outputs in {out_dir}")
            return 0
        if args.command == "cascade":
            result = run_cascade(cfg, out_dir)
            print(result["report"].summary_table())
            print(f"cascade finished in {time.perf_counter() - t0:.1f}s, "
                  f"outputs in {out_dir}")
            return 0
        raise ConfigError(f"unknown command '{args.command}'")
    except (ConfigError, CompatibilityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - internal error path
        import traceback
        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def entry():  # console-script hook
    sys.exit(main(sys.argv[1:]))

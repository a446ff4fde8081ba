"""Batch command line front-end.

Reads a JSON run configuration, drives one of the solvers, and emits CSV
time series (plus PASS/FAIL validation reports).  Complex numbers in configs
are [re, im] pairs; bare numbers are accepted and read as real.  Exit codes:
0 success, 2 configuration error, 3 solver failure, 4 tolerance exceeded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .channels import (
    LindbladGenerator,
    NullOutcome,
    SuperOperator,
    certify_cptp,
    jump_superop,
    liouvillian,
    relaxation_drift_superop,
)
from .collisional import (
    CollisionalModel,
    SemigroupFamily,
    SolverError,
    SolverGrid,
    TabulatedFamily,
    certify_dynamics,
    identity_family,
    laplace_solve,
    mc_solve,
    series_solve,
    volterra_solve,
)
from .lindblad_traj import dyson_solve, mc_average
from .qmatrix import DensityMatrix, expm_flow, trace_distance
from .renewal import Erlang, Exponential, Tabulated

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_TOLERANCE = 4

LINDBLAD_SOLVERS = ("dyson", "mc-lindblad", "expm")
COLLISIONAL_SOLVERS = ("series", "volterra", "laplace", "mc")
STATE_TOL = 1e-8


class ConfigError(Exception):
    """Configuration problem, annotated with the offending field path."""


def _fmt(value: float) -> str:
    return f"{value:.16e}"


def _decode_complex(node, path: str) -> complex:
    if isinstance(node, (int, float)):
        return complex(node)
    if isinstance(node, list) and len(node) == 2 and all(isinstance(x, (int, float)) for x in node):
        return complex(node[0], node[1])
    raise ConfigError(f"{path}: expected a number or an [re, im] pair, got {node!r}")


def _decode_matrix(node, path: str) -> np.ndarray:
    if not isinstance(node, list) or not node:
        raise ConfigError(f"{path}: expected a non-empty list of rows")
    rows = []
    for i, row in enumerate(node):
        if not isinstance(row, list) or len(row) != len(node):
            raise ConfigError(f"{path}[{i}]: matrix must be square")
        rows.append([_decode_complex(entry, f"{path}[{i}][{j}]") for j, entry in enumerate(row)])
    return np.array(rows, dtype=complex)


def _require(cfg: dict, key: str, path: str):
    if key not in cfg:
        raise ConfigError(f"{path}.{key}: missing required field")
    return cfg[key]


class RunConfig:
    """Structurally decoded configuration; semantic validation happens on build."""

    def __init__(self, raw: dict, base_dir: str = "."):
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        self.base_dir = base_dir
        model = _require(raw, "model", "config")
        self.kind = _require(model, "kind", "config.model")
        if self.kind not in ("lindblad", "collisional"):
            raise ConfigError(f"config.model.kind: unknown kind {self.kind!r}")
        self.model_raw = model
        self.initial_state = _decode_matrix(_require(raw, "initial_state", "config"),
                                            "config.initial_state")
        self.solver = _require(raw, "solver", "config")
        if self.solver not in LINDBLAD_SOLVERS + COLLISIONAL_SOLVERS:
            raise ConfigError(f"config.solver: unknown solver {self.solver!r}")
        grid = _require(raw, "grid", "config")
        t_max = _require(grid, "t_max", "config.grid")
        steps = _require(grid, "steps", "config.grid")
        if not isinstance(steps, int) or steps < 2:
            raise ConfigError("config.grid.steps: must be an integer >= 2")
        if not isinstance(t_max, (int, float)) or not t_max > 0:
            raise ConfigError("config.grid.t_max: must be a positive number")
        self.grid = SolverGrid(float(t_max), steps)
        mc = raw.get("mc", {})
        self.mc_samples = int(mc.get("samples", 1000))
        self.mc_seed = int(mc.get("seed", 0))
        self.mc_direction = mc.get("direction", "reverse")
        if self.mc_direction not in ("forward", "reverse"):
            raise ConfigError("config.mc.direction: must be 'forward' or 'reverse'")
        if self.mc_samples < 1:
            raise ConfigError("config.mc.samples: must be a positive integer")
        self.n_max = raw.get("n_max")
        if self.n_max is not None and (not isinstance(self.n_max, int) or self.n_max < 0):
            raise ConfigError("config.n_max: must be a non-negative integer")
        outputs = raw.get("outputs", {})
        self.density_entries = bool(outputs.get("density_entries", True))
        self.observables = []
        for k, obs in enumerate(outputs.get("observables", [])):
            name = _require(obs, "name", f"config.outputs.observables[{k}]")
            mat = _decode_matrix(_require(obs, "matrix", f"config.outputs.observables[{k}]"),
                                 f"config.outputs.observables[{k}].matrix")
            self.observables.append((str(name), mat))

    @property
    def dim(self) -> int:
        return self.initial_state.shape[0]


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} line {exc.lineno}: invalid JSON ({exc.msg})")
    return RunConfig(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def build_initial_state(cfg: RunConfig) -> DensityMatrix:
    try:
        return DensityMatrix(cfg.initial_state, tol=STATE_TOL)
    except ValueError as exc:
        raise ConfigError(f"config.initial_state: {exc}")


def build_lindblad(cfg: RunConfig) -> LindbladGenerator:
    model = cfg.model_raw
    ham = _decode_matrix(_require(model, "hamiltonian", "config.model"), "config.model.hamiltonian")
    ops = [_decode_matrix(m, f"config.model.jump_ops[{k}]")
           for k, m in enumerate(model.get("jump_ops", []))]
    try:
        return LindbladGenerator(ham, ops)
    except ValueError as exc:
        raise ConfigError(f"config.model: {exc}")


def build_wait(cfg: RunConfig, check_normalization: bool = True):
    node = _require(cfg.model_raw, "wait", "config.model")
    kind = _require(node, "kind", "config.model.wait")
    try:
        if kind == "exponential":
            return Exponential(float(_require(node, "rate", "config.model.wait")))
        if kind == "erlang":
            return Erlang(int(_require(node, "shape", "config.model.wait")),
                          float(_require(node, "rate", "config.model.wait")))
        if kind == "tabulated":
            if "csv" in node:
                path = os.path.join(cfg.base_dir, node["csv"])
                return Tabulated.from_csv(path, check_normalization=check_normalization)
            times = _require(node, "times", "config.model.wait")
            density = _require(node, "density", "config.model.wait")
            return Tabulated(times, density, check_normalization=check_normalization)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"config.model.wait: {exc}")
    raise ConfigError(f"config.model.wait.kind: unknown kind {kind!r}")


def build_family(cfg: RunConfig, validate: bool = True):
    node = _require(cfg.model_raw, "family", "config.model")
    kind = _require(node, "kind", "config.model.family")
    try:
        if kind == "identity":
            return identity_family(cfg.dim)
        if kind == "semigroup":
            ham = _decode_matrix(_require(node, "hamiltonian", "config.model.family"),
                                 "config.model.family.hamiltonian")
            ops = [_decode_matrix(m, f"config.model.family.jump_ops[{k}]")
                   for k, m in enumerate(node.get("jump_ops", []))]
            return SemigroupFamily(LindbladGenerator(ham, ops))
        if kind == "tabulated":
            times = _require(node, "times", "config.model.family")
            mats = [_decode_matrix(m, f"config.model.family.matrices[{k}]")
                    for k, m in enumerate(_require(node, "matrices", "config.model.family"))]
            return TabulatedFamily(times, mats, validate=validate)
    except ValueError as exc:
        raise ConfigError(f"config.model.family: {exc}")
    raise ConfigError(f"config.model.family.kind: unknown kind {kind!r}")


def build_collision(cfg: RunConfig) -> SuperOperator:
    node = _require(cfg.model_raw, "collision", "config.model")
    try:
        if "kraus" in node:
            ops = [_decode_matrix(m, f"config.model.collision.kraus[{k}]")
                   for k, m in enumerate(node["kraus"])]
            return SuperOperator.from_kraus(ops)
        if "matrix" in node:
            return SuperOperator(_decode_matrix(node["matrix"], "config.model.collision.matrix"))
    except ValueError as exc:
        raise ConfigError(f"config.model.collision: {exc}")
    raise ConfigError("config.model.collision: need either 'kraus' or 'matrix'")


def build_collisional(cfg: RunConfig, validate: bool = True) -> CollisionalModel:
    family = build_family(cfg, validate=validate)
    collision = build_collision(cfg)
    wait = build_wait(cfg, check_normalization=validate)
    try:
        return CollisionalModel(family, collision, wait, validate=validate)
    except ValueError as exc:
        raise ConfigError(f"config.model: {exc}")


def _check_solver_kind(cfg: RunConfig, solver: str) -> None:
    if cfg.kind == "lindblad" and solver not in LINDBLAD_SOLVERS:
        raise ConfigError(f"config.solver: {solver!r} does not apply to a lindblad model")
    if cfg.kind == "collisional" and solver not in COLLISIONAL_SOLVERS:
        raise ConfigError(f"config.solver: {solver!r} does not apply to a collisional model")


def run_solver(cfg: RunConfig, solver: str, threads: int) -> np.ndarray:
    """Evolved state at every grid node, shape (steps + 1, dim, dim)."""
    _check_solver_kind(cfg, solver)
    rho0 = build_initial_state(cfg)
    ts = cfg.grid.times
    if cfg.kind == "lindblad":
        gen = build_lindblad(cfg)
        if solver == "expm":
            flow = expm_flow(liouvillian(gen).mat)
            vec = rho0.mat.reshape(-1, order="F")
            out = np.stack([(flow(t) @ vec).reshape(cfg.dim, cfg.dim).T for t in ts])
        elif solver == "dyson":
            n_max = cfg.n_max if cfg.n_max is not None else 6
            out = np.stack([rho0.mat if t == 0.0 else
                            dyson_solve(gen, rho0, t, n_max, max(2, int(round(t / cfg.grid.dt)) + 1))
                            for t in ts])
        else:  # mc-lindblad
            out = np.empty((ts.size, cfg.dim, cfg.dim), dtype=complex)
            for i, t in enumerate(ts):
                if t == 0.0:
                    out[i] = rho0.mat
                else:
                    out[i] = mc_average(gen, rho0, t, cfg.mc_samples, cfg.mc_seed,
                                        workers=threads, stream_offset=i * cfg.mc_samples).mat
        return out
    model = build_collisional(cfg)
    if solver == "volterra":
        return volterra_solve(model, rho0, cfg.grid)
    if solver == "series":
        return series_solve(model, rho0, cfg.grid, cfg.n_max)
    if solver == "laplace":
        return laplace_solve(model, rho0, ts)
    out = np.empty((ts.size, cfg.dim, cfg.dim), dtype=complex)
    for i, t in enumerate(ts):
        if t == 0.0:
            out[i] = rho0.mat
        else:
            out[i] = mc_solve(model, rho0, t, cfg.mc_samples, cfg.mc_seed,
                              direction=cfg.mc_direction, workers=threads,
                              stream_offset=i * cfg.mc_samples)
    return out


def emit_csv(cfg: RunConfig, states: np.ndarray, stream) -> None:
    dim = cfg.dim
    header = ["time"]
    if cfg.density_entries:
        for i in range(dim):
            for j in range(dim):
                header.append(f"r_{i}{j}_re")
                header.append(f"r_{i}{j}_im")
    for name, _ in cfg.observables:
        header.append(name)
    stream.write(",".join(header) + "\n")
    for t, state in zip(cfg.grid.times, states):
        row = [_fmt(t)]
        if cfg.density_entries:
            for i in range(dim):
                for j in range(dim):
                    row.append(_fmt(state[i, j].real))
                    row.append(_fmt(state[i, j].imag))
        for _, obs in cfg.observables:
            row.append(_fmt(float(np.trace(obs @ state).real)))
        stream.write(",".join(row) + "\n")


def _default_threads(value) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("RENEWALQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"RENEWALQ_THREADS: not an integer: {env!r}")
    return 1


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    threads = _default_threads(args.threads)
    states = run_solver(cfg, cfg.solver, threads)
    if args.out:
        with open(args.out, "w", newline="") as handle:
            emit_csv(cfg, states, handle)
    else:
        emit_csv(cfg, states, sys.stdout)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    threads = _default_threads(None)
    states_a = run_solver(cfg, args.solver_a, threads)
    states_b = run_solver(cfg, args.solver_b, threads)
    distances = [trace_distance(a, b) for a, b in zip(states_a, states_b)]
    sys.stdout.write("time,trace_distance\n")
    for t, d in zip(cfg.grid.times, distances):
        sys.stdout.write(f"{_fmt(t)},{_fmt(d)}\n")
    worst = max(distances)
    sys.stdout.write(f"max_distance={_fmt(worst)}\n")
    return EXIT_OK if worst < args.tol else EXIT_TOLERANCE


def _validation_checks(cfg: RunConfig):
    checks = []
    try:
        build_initial_state(cfg)
        checks.append(("initial_state", True, ""))
    except ConfigError as exc:
        checks.append(("initial_state", False, str(exc)))
    if cfg.kind == "lindblad":
        try:
            gen = build_lindblad(cfg)
            checks.append(("hamiltonian_hermitian", True, ""))
        except ConfigError as exc:
            checks.append(("hamiltonian_hermitian", False, str(exc)))
            return checks
        full = liouvillian(gen).mat
        split = jump_superop(gen).mat + relaxation_drift_superop(gen).mat
        defect = float(np.max(np.abs(full - split)))
        checks.append(("generator_decomposition", defect <= 1e-13, f"defect {defect:.2e}"))
        flow = expm_flow(full)
        for t in np.linspace(0.2, 1.0, 5) * cfg.grid.t_max:
            report = certify_cptp(SuperOperator(flow(t)), 1e-8)
            checks.append((f"semigroup_cptp[t={t:g}]", report.is_cp and report.is_tp,
                           f"min_choi={report.min_choi_eigenvalue:.2e} tp_defect={report.tp_defect:.2e}"))
        return checks
    wait_ok = True
    node = _require(cfg.model_raw, "wait", "config.model")
    if node.get("kind") == "tabulated":
        try:
            wait = build_wait(cfg, check_normalization=False)
            total = float(np.trapezoid(wait.density, wait.times))
            wait_ok = abs(total - 1.0) <= 1e-6
            checks.append(("wait_normalization", wait_ok, f"integral {total:.8f}"))
            checks.append(("wait_survival_start", abs(wait.survival(0.0) - 1.0) <= 1e-12, ""))
        except ConfigError as exc:
            checks.append(("wait_normalization", False, str(exc)))
            wait_ok = False
    else:
        try:
            wait = build_wait(cfg)
            checks.append(("wait_normalization", True, "closed form"))
            checks.append(("wait_survival_start", abs(wait.survival(0.0) - 1.0) <= 1e-12, ""))
        except ConfigError as exc:
            checks.append(("wait_normalization", False, str(exc)))
            wait_ok = False
    try:
        collision = build_collision(cfg)
        report = certify_cptp(collision, 1e-8)
        checks.append(("collision_cptp", report.is_cp and report.is_tp,
                       f"min_choi={report.min_choi_eigenvalue:.2e} tp_defect={report.tp_defect:.2e}"))
        collision_ok = report.is_cp and report.is_tp
    except ConfigError as exc:
        checks.append(("collision_cptp", False, str(exc)))
        collision_ok = False
    family_ok = True
    try:
        family = build_family(cfg, validate=False)
        start = float(np.max(np.abs(family.at(0.0) - np.eye(cfg.dim**2))))
        checks.append(("family_start_identity", start <= 1e-8, f"defect {start:.2e}"))
        if isinstance(family, TabulatedFamily):
            nodes = list(zip(family.times, family.mats))
        else:
            nodes = [(t, family.at(t)) for t in np.linspace(0.2, 1.0, 5) * cfg.grid.t_max]
        for t, mat in nodes:
            report = certify_cptp(SuperOperator(mat), 1e-8)
            ok = report.is_cp and report.is_tp
            family_ok = family_ok and ok
            checks.append((f"family_cptp[t={t:g}]", ok,
                           f"min_choi={report.min_choi_eigenvalue:.2e} tp_defect={report.tp_defect:.2e}"))
    except ConfigError as exc:
        checks.append(("family_start_identity", False, str(exc)))
        family_ok = False
    if wait_ok and collision_ok and family_ok:
        try:
            model = build_collisional(cfg, validate=False)
            grid = SolverGrid(cfg.grid.t_max, min(cfg.grid.steps, 400))
            idx = np.unique(np.round(np.linspace(0.2, 1.0, 5) * grid.steps).astype(int))
            times = grid.times[idx]
            for t, report in zip(times, certify_dynamics(model, "volterra", grid, times)):
                checks.append((f"dynamics_cptp[t={t:g}]", report.is_cp and report.is_tp,
                               f"min_choi={report.min_choi_eigenvalue:.2e} tp_defect={report.tp_defect:.2e}"))
        except (ConfigError, SolverError) as exc:
            checks.append(("dynamics_cptp", False, str(exc)))
    else:
        checks.append(("dynamics_cptp", False, "skipped: ingredient checks failed"))
    return checks


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    checks = _validation_checks(cfg)
    all_ok = True
    for name, ok, detail in checks:
        all_ok = all_ok and ok
        suffix = f" ({detail})" if detail else ""
        sys.stdout.write(f"{'PASS' if ok else 'FAIL'} {name}{suffix}\n")
    sys.stdout.write(f"{'PASS' if all_ok else 'FAIL'} overall\n")
    return EXIT_OK if all_ok else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renewalq",
                                     description="Open quantum system dynamics solvers")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", help="run a solver and emit a CSV time series")
    sim.add_argument("config")
    sim.add_argument("--out", help="write CSV here instead of standard output")
    sim.add_argument("--threads", type=int, default=None,
                     help="Monte Carlo worker threads (default: RENEWALQ_THREADS or 1)")
    sim.set_defaults(func=cmd_simulate)
    cmp_parser = sub.add_parser("compare", help="trace distance between two solvers")
    cmp_parser.add_argument("config")
    cmp_parser.add_argument("solver_a")
    cmp_parser.add_argument("solver_b")
    cmp_parser.add_argument("--tol", type=float, default=1e-3,
                            help="exit 4 when the max distance reaches this value")
    cmp_parser.set_defaults(func=cmd_compare)
    val = sub.add_parser("validate", help="check a config's physical validity")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (SolverError, NullOutcome, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"solver error: {exc}\n")
        return EXIT_SOLVER


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

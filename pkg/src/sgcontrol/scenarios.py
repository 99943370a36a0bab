"""Configuration-driven experiment runner.

A scenario bundles mesh resolution, random-field truncation, polynomial
order, control-problem switches and solver choice.  Configurations are
flat INI text; every default mirrors the reference experiment setup
(unit square, seven uniform KL terms of variance 0.25 and correlation
length one, order-two chaos, 2^7 mesh).  Each run emits one result row
plus nodal-field CSV dumps.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import splu

from . import colloc, fem, gpc, oneshot, solve
from .oneshot import (ControlSpec, GalerkinWorkspace, RhsData, StochasticField,
                      TargetSpec)
from .randfield import CovarianceSpec, KlField, kl_expand


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


# -- experiment data ----------------------------------------------------------

#: Exact squared L2 norm of the piecewise control target below.
CONTROL_TARGET_SQ = 1.52

#: Horizontal discontinuity lines of the control target.
CONTROL_TARGET_CUTS = (0.4, 0.6)


def control_target_values(x: np.ndarray) -> np.ndarray:
    """Piecewise plateau-and-ramp tracking target for the control runs."""
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    out = np.zeros(x.shape[0])
    lower = x2 <= 0.4
    upper = x2 >= 0.6
    for band, plateau, edge in ((lower, 1.0, 0.1), (upper, 2.0, 0.2)):
        out = np.where(band & (x1 < edge), 10.0 * x1, out)
        out = np.where(band & (x1 >= edge) & (x1 <= 1.0 - edge), plateau, out)
        out = np.where(band & (x1 > 1.0 - edge), 10.0 - 10.0 * x1, out)
    return out


def control_target() -> TargetSpec:
    return TargetSpec.from_callable(control_target_values,
                                    cut_lines=CONTROL_TARGET_CUTS,
                                    exact_sq_integral=CONTROL_TARGET_SQ)


def inverse_source_values(x: np.ndarray) -> np.ndarray:
    """Deterministic source whose response defines the inverse-problem target."""
    x = np.atleast_2d(x)
    return 50.0 * np.sin(np.pi * x[:, 0]) * np.cos(2.0 * np.pi * x[:, 1])


# -- configuration ------------------------------------------------------------

METHODS = ("galerkin", "collocation")
SOLVERS = ("direct", "mean_based", "multigrid", "none")
TARGETS = ("control", "inverse_mean", "inverse_stochastic")
NOISES = ("none", "gaussian")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "run"
    table: str = ""
    method: str = "galerkin"
    solver: str = "direct"
    n: int = 128
    kl_terms: int = 7
    variance: float = 0.25
    corr_length: float = 1.0
    kappa_mean: float = 1.0
    order: int = 2
    colloc_level: int = 2
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1e-3
    delta: float = 0.0
    epsilon: int = 0
    functional: str = "J1"
    regularization: str = "L2"
    channel: str = "distributive"
    control_noise: str = "none"
    noise_terms: int = 3
    noise_variance: float = 1.0
    fixed_source: float = 0.0
    target: str = "control"
    gammas: tuple = ()
    rel_tol: float = 1e-8
    max_iter: int = 500
    mg_coarse_n: int = 8
    workers: int = 0
    output_dir: str = "out"

    def control_spec(self, gamma: float | None = None) -> ControlSpec:
        return ControlSpec(self.alpha, self.beta,
                           self.gamma if gamma is None else gamma,
                           self.delta, self.epsilon, self.functional,
                           self.regularization, self.channel)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}")
        if self.control_noise not in NOISES:
            raise ConfigError(f"unknown control noise {self.control_noise!r}")
        if self.n < 2:
            raise ConfigError("mesh resolution must be at least 2")
        if self.method == "collocation" and self.regularization == "H1":
            raise ConfigError("H1 regularisation under collocation is unsupported")
        if self.method == "collocation" and self.control_noise != "none":
            raise ConfigError("collocation runs support perfect controllers only")
        if any(g <= 0 for g in self.gammas):
            raise ConfigError("sweep penalty values must be positive")
        try:
            self.control_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = {
    "scenario": ("scenario", "table", "method", "solver"),
    "mesh": ("n",),
    "random_field": ("kl_terms", "variance", "corr_length", "kappa_mean"),
    "gpc": ("order", "colloc_level"),
    "control": ("alpha", "beta", "gamma", "delta", "epsilon", "functional",
                "regularization", "channel", "control_noise", "noise_terms",
                "noise_variance", "fixed_source"),
    "target": ("target",),
    "solver": ("rel_tol", "max_iter", "mg_coarse_n", "workers"),
    "sweep": ("gammas",),
    "output": ("output_dir",),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ScenarioConfig)}


def parse_config(text: str) -> ScenarioConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    known = {name: section for section, names in _SECTIONS.items()
             for name in names}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in known or known[key] != section:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _convert(key, raw)
    cfg = ScenarioConfig(**values)
    cfg.validate()
    return cfg


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if key == "gammas":
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def serialize_config(cfg: ScenarioConfig) -> str:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {}
        for name in names:
            val = getattr(cfg, name)
            if name == "gammas":
                parser[section][name] = " ".join(f"{g:g}" for g in val)
            else:
                parser[section][name] = str(val)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text())


# -- result rows ---------------------------------------------------------------

@dataclass
class ResultRow:
    scenario: str
    table: str
    method: str
    functional: str
    beta: float
    penalty: float
    cost: float
    tracking: float
    std_sq: float
    e_u: float
    iterations: int
    seconds: float
    converged: bool

    def validate(self) -> None:
        for name in ("cost", "tracking", "std_sq"):
            if not math.isfinite(getattr(self, name)):
                raise RuntimeError(f"non-finite result field {name}")

    HEADER = ["scenario", "table", "method", "functional", "beta", "penalty",
              "J", "tracking", "std_sq", "e_u", "iterations", "seconds",
              "converged"]

    def as_list(self) -> list:
        return [self.scenario, self.table, self.method, self.functional,
                f"{self.beta:g}", f"{self.penalty:g}", f"{self.cost:.6e}",
                f"{self.tracking:.6e}", f"{self.std_sq:.6e}",
                "" if math.isnan(self.e_u) else f"{self.e_u:.6e}",
                self.iterations, f"{self.seconds:.3f}", int(self.converged)]


def write_result_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ResultRow.HEADER)
        for row in rows:
            writer.writerow(row.as_list())


# -- problem construction ------------------------------------------------------

@dataclass
class Problem:
    """Assembled ingredients of one scenario, reusable across a sweep."""

    cfg: ScenarioConfig
    ws: GalerkinWorkspace
    data: RhsData
    grid: gpc.SparseGrid | None
    source_sq: float   # squared discrete L2 norm of the inverse source
    source_proj: np.ndarray | None


def _build_basis(cfg: ScenarioConfig) -> gpc.GpcBasis:
    families = ["legendre"] * cfg.kl_terms
    if cfg.control_noise == "gaussian":
        families += ["hermite"] * cfg.noise_terms
    return gpc.build_basis(len(families), cfg.order, families)


def _build_noise(cfg: ScenarioConfig) -> KlField | None:
    if cfg.control_noise == "none":
        return None
    spec = CovarianceSpec(cfg.noise_variance, 1.0)
    return kl_expand(spec, cfg.noise_terms, 0.0, slot_offset=cfg.kl_terms)


def build_problem(cfg: ScenarioConfig) -> Problem:
    cfg.validate()
    mesh = fem.build_mesh(cfg.n)
    space = fem.build_space(mesh)
    basis = _build_basis(cfg)
    kappa = kl_expand(CovarianceSpec(cfg.variance, cfg.corr_length),
                      cfg.kl_terms, cfg.kappa_mean)
    ws = oneshot.build_workspace(space, basis, kappa)
    noise = _build_noise(cfg)
    grid = None
    if cfg.method == "collocation" or cfg.target != "control":
        grid = gpc.build_sparse_grid(cfg.kl_terms, cfg.colloc_level)

    fixed = cfg.fixed_source if cfg.fixed_source != 0.0 else None
    source_proj = None
    source_sq = float("nan")
    if cfg.target == "control":
        target = control_target()
    else:
        target = generate_inverse_target(cfg, ws, grid)
        b_src = space.restrict_vector(
            fem.load_vector(mesh, inverse_source_values))
        source_proj = splu(ws.mass.tocsc()).solve(b_src)
        source_sq = float(source_proj @ (ws.mass @ source_proj))

    data = RhsData(target=target, control_noise=noise, fixed_source=fixed)
    return Problem(cfg, ws, data, grid, source_sq, source_proj)


def generate_inverse_target(cfg: ScenarioConfig, ws: GalerkinWorkspace,
                            grid: gpc.SparseGrid | None) -> TargetSpec:
    """Target field as the forward response to the deterministic source.

    The stochastic variant keeps the whole response; the deterministic
    variant keeps only its mean.  Collocation scenarios build the target
    from independent forward solves at the grid points.
    """
    space = ws.space
    b_src = space.restrict_vector(
        fem.load_vector(space.mesh, inverse_source_values))

    if cfg.method == "collocation":
        snaps = np.empty((len(grid), space.n_dofs))
        for i, y in enumerate(grid.points):
            k_pt = colloc._point_stiffness(ws, y)
            snaps[i] = splu(k_pt.tocsc()).solve(b_src)
        if cfg.target == "inverse_mean":
            snaps = np.tile(snaps.T @ grid.weights, (len(grid), 1))
        return _snapshot_target(snaps)

    loads = np.zeros((ws.basis.size, space.n_dofs))
    loads[0] = b_src
    try:
        z_fwd = oneshot.forward_solve(ws, loads)
    except RuntimeError as exc:
        raise SolverFailure(f"forward target solve failed: {exc}") from exc
    if cfg.target == "inverse_mean":
        z_fwd = StochasticField.deterministic(z_fwd.mean, ws.basis.size)
    return TargetSpec.from_field(z_fwd)


def _snapshot_target(snaps: np.ndarray) -> TargetSpec:
    return TargetSpec("snapshots", fld=StochasticField(snaps))


# -- running -------------------------------------------------------------------

def _solver_choice(cfg: ScenarioConfig, op) -> str:
    if cfg.solver != "direct":
        return cfg.solver
    if op.size > 200_000:
        raise ConfigError(
            f"system of size {op.size} is too large for a direct solve; "
            "choose mean_based or multigrid")
    return "direct"


def _mg_hierarchy(cfg: ScenarioConfig, spec: ControlSpec, prob: Problem):
    """Re-assembled operators and transfer maps from coarse to fine."""
    ns = []
    n = cfg.n
    while n > cfg.mg_coarse_n and n % 2 == 0:
        ns.append(n)
        n //= 2
    ns.append(n)
    ns.reverse()
    if len(ns) < 2:
        raise ConfigError("mesh too coarse for a multigrid hierarchy")
    hierarchy = []
    prev_space = None
    for nk in ns:
        if nk == cfg.n:
            ws = prob.ws
        else:
            space_k = fem.build_space(fem.build_mesh(nk))
            ws = oneshot.build_workspace(space_k, prob.ws.basis, prob.ws.kappa)
        op_k = oneshot.reduced_operator(spec, ws)
        prol = None
        if prev_space is not None:
            prol = fem.prolongation(prev_space, ws.space)
        hierarchy.append((op_k, prol))
        prev_space = ws.space
    return hierarchy


def _solve_galerkin(cfg: ScenarioConfig, spec: ControlSpec, prob: Problem):
    if spec.regularization == "H1":
        op, rhs = oneshot.assemble_saddle(spec, prob.ws, prob.data)
    else:
        op, rhs = oneshot.assemble_reduced(spec, prob.ws, prob.data)
    choice = _solver_choice(cfg, op)
    kcfg = solve.KrylovConfig(rel_tol=cfg.rel_tol, max_iter=cfg.max_iter)
    if choice == "direct":
        t0 = time.perf_counter()
        x = splu(op.to_sparse().tocsc()).solve(rhs)
        rhs_norm = float(np.linalg.norm(rhs))
        rel = (float(np.linalg.norm(rhs - op.matvec(x))) / rhs_norm
               if rhs_norm > 0.0 else 0.0)
        report = solve.SolveReport(1, rel, True, time.perf_counter() - t0,
                                   "direct", "none")
    else:
        precond = None
        if choice == "mean_based":
            mass_u = op.meta.get("mass_u", prob.ws.mass)
            precond = solve.MeanBasedPreconditioner(
                prob.ws.stiffness[0], prob.ws.mass, spec, mass_u)
        elif choice == "multigrid":
            if spec.regularization == "H1":
                raise ConfigError("multigrid scenarios support the reduced form")
            precond = solve.CollectiveMultigrid(_mg_hierarchy(cfg, spec, prob))
        x, report = solve.krylov_solve(op, rhs, precond, kcfg)
        if not report.converged:
            raise SolverFailure(
                f"linear solve stalled at residual "
                f"{report.final_relative_residual:.3e}")
    return op, x, report


class SolverFailure(RuntimeError):
    """The configured iterative solver failed to converge."""


def _galerkin_fields(cfg: ScenarioConfig, spec: ControlSpec, prob: Problem,
                     x: np.ndarray):
    q = prob.ws.basis.size
    ncomp = 3 if spec.regularization == "H1" else 2
    blocks = x.reshape(ncomp, q, prob.ws.space.n_dofs)
    z = StochasticField(blocks[0].copy())
    lam = StochasticField(blocks[-1].copy())
    if spec.regularization == "H1":
        u = StochasticField(blocks[1].copy())
    else:
        u = oneshot.recover_control(spec, lam, prob.ws.space)
        if spec.epsilon == 1 and prob.data.control_noise is not None:
            noise = oneshot.noise_coefficients(
                prob.data.control_noise, prob.ws.space, prob.ws.basis).data
            if spec.channel == "boundary":
                mask = np.zeros(prob.ws.space.n_dofs, dtype=bool)
                mask[oneshot.neumann_free_nodes(prob.ws.space)] = True
                noise = noise * mask
            u = StochasticField(u.data + noise)
    return z, lam, u


def run_scenario(cfg: ScenarioConfig, gamma: float | None = None,
                 write_outputs: bool = True) -> ResultRow:
    """Assemble, solve, post-process and (optionally) dump one scenario."""
    prob = build_problem(cfg)
    return run_prepared(prob, gamma, write_outputs)


def run_prepared(prob: Problem, gamma: float | None = None,
                 write_outputs: bool = True) -> ResultRow:
    try:
        return _run_prepared(prob, gamma, write_outputs)
    except SolverFailure as exc:
        if write_outputs:
            out = scenario_dir(prob.cfg)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "failure.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["scenario", "error"])
                writer.writerow([prob.cfg.scenario, str(exc)])
        raise


def _run_prepared(prob: Problem, gamma: float | None = None,
                  write_outputs: bool = True) -> ResultRow:
    cfg = prob.cfg
    spec = cfg.control_spec(gamma)
    t0 = time.perf_counter()

    if cfg.method == "galerkin":
        _op, x, report = _solve_galerkin(cfg, spec, prob)
        z, _lam, u = _galerkin_fields(cfg, spec, prob, x)
        g_field = u if spec.channel == "boundary" else None
        u_field = u if spec.channel == "distributive" else None
        cost = oneshot.eval_cost(spec, prob.ws, z, u_field, g_field,
                                 prob.data.target)
        mean, var = oneshot.moments(z)
        ctrl_mean, ctrl_var = oneshot.moments(u)
        e_u = _galerkin_source_error(prob, u) if prob.source_proj is not None \
            else float("nan")
    else:
        solution = _solve_collocation(cfg, spec, prob)
        report = solution.reports[0] if solution.reports else \
            solve.SolveReport(len(prob.grid), 0.0, True, 0.0, "direct",
                              "per_point_lu")
        cost = colloc.colloc_cost(spec, prob.ws, solution, prob.data.target)
        mean, var = colloc.colloc_moments(solution)
        ctrl_mean, ctrl_var = colloc.colloc_moments(solution, "control")
        e_u = _colloc_source_error(prob, solution) if prob.source_proj is not None \
            else float("nan")

    penalty = spec.delta if spec.channel == "boundary" else spec.gamma
    row = ResultRow(cfg.scenario, cfg.table, cfg.method, spec.functional,
                    spec.beta, penalty, cost.total, cost.tracking, cost.std_sq,
                    e_u, report.iterations, time.perf_counter() - t0,
                    report.converged)
    row.validate()

    if write_outputs:
        out = scenario_dir(cfg)
        coords = prob.ws.space.coords()
        write_result_csv(out / "result.csv", [row])
        fem.write_nodal_csv(out / "state_mean.csv", coords, mean)
        fem.write_nodal_csv(out / "state_variance.csv", coords, var)
        fem.write_nodal_csv(out / "control_mean.csv", coords, ctrl_mean)
        fem.write_nodal_csv(out / "control_variance.csv", coords, ctrl_var)
        solve.append_report_csv(out / "solve_log.csv", cfg.scenario, report)
        if cfg.method == "collocation":
            colloc.write_weight_table(prob.grid, out / "cubature_weights.csv")
    return row


def _solve_collocation(cfg: ScenarioConfig, spec: ControlSpec, prob: Problem):
    mode = colloc.classify_coupling(spec)
    kcfg = solve.KrylovConfig(rel_tol=cfg.rel_tol, max_iter=cfg.max_iter)
    try:
        if mode is colloc.CouplingMode.DECOUPLED:
            return colloc.solve_decoupled(spec, prob.ws, prob.grid, prob.data,
                                          workers=cfg.workers)
        return colloc.solve_coupled(spec, prob.ws, prob.grid, prob.data, kcfg)
    except RuntimeError as exc:
        raise SolverFailure(str(exc)) from exc


def _galerkin_source_error(prob: Problem, u: StochasticField) -> float:
    diff = u.data.copy()
    diff[0] -= prob.source_proj
    err = float(np.einsum("qn,qn->", diff, (prob.ws.mass @ diff.T).T))
    return err / prob.source_sq


def _colloc_source_error(prob: Problem, solution) -> float:
    diff = solution.control - prob.source_proj[None, :]
    w = solution.grid.weights
    err = float(np.einsum("p,pn,pn->", w, diff, (prob.ws.mass @ diff.T).T))
    return err / prob.source_sq


def scenario_dir(cfg: ScenarioConfig) -> Path:
    import os

    base = os.environ.get("SGCONTROL_OUTDIR", cfg.output_dir)
    return Path(base) / cfg.scenario


def run_sweep(cfg: ScenarioConfig, write_outputs: bool = True) -> list[ResultRow]:
    """One run per sweep penalty value, plus a (penalty, tracking) table."""
    gammas = cfg.gammas or (cfg.gamma,)
    prob = build_problem(cfg)
    rows = []
    for g in gammas:
        sub = replace(cfg, scenario=f"{cfg.scenario}_g{g:g}")
        prob.cfg = sub
        rows.append(run_prepared(prob, gamma=g, write_outputs=write_outputs))
    prob.cfg = cfg
    if write_outputs:
        out = scenario_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["penalty", "tracking"])
            for g, row in zip(gammas, rows):
                writer.writerow([f"{g:g}", f"{row.tracking:.6e}"])
        write_result_csv(out / "sweep_rows.csv", rows)
    return rows


def collate_tables(root, out_dir=None) -> dict[str, list[list[str]]]:
    """Collect result rows under ``root`` into per-table summary CSVs.

    ``root`` may hold run outputs directly, or scenario configs whose
    output directories are then searched.
    """
    root = Path(root)
    out_dir = Path(out_dir) if out_dir else root
    candidates = sorted(root.rglob("result.csv"))
    for ini in sorted(root.rglob("*.ini")):
        try:
            cfg = load_config(ini)
        except ConfigError:
            continue
        hit = scenario_dir(cfg) / "result.csv"
        if hit.exists() and hit not in candidates:
            candidates.append(hit)
    grouped: dict[str, list[list[str]]] = {}
    for path in candidates:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                label = rec.get("table") or "untabled"
                grouped.setdefault(label, []).append(
                    [rec[k] for k in ResultRow.HEADER])
    for label, rows in grouped.items():
        out_path = out_dir / f"{label}.csv"
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ResultRow.HEADER)
            writer.writerows(rows)
    return grouped

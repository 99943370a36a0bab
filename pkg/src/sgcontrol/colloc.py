"""Stochastic collocation solution of the one-shot optimality system.

When the cost uses the full tensor-norm tracking term, no variance
penalty, and a wholly stochastic control, the optimality system at each
sparse-grid point is an independent deterministic problem.  Any moment of
an unknown entering the formulation (a mean control, a variance penalty,
or mean-based tracking) couples the collocation points through cubature
sums, and the assembled block system must be solved as a whole.
"""

from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import fem
from .gpc import SparseGrid, interp_weights
from .oneshot import (ControlSpec, CostBreakdown, GalerkinWorkspace,
                      OneShotOperator, RhsData, TargetSpec, Term,
                      neumann_free_nodes)
from .solve import KrylovConfig, krylov_solve


class CouplingMode(enum.Enum):
    DECOUPLED = "decoupled"
    COUPLED_MEAN = "coupled-mean"
    COUPLED_VARIANCE = "coupled-variance"
    COUPLED_J2 = "coupled-J2"
    COUPLED_H1 = "coupled-h1"


def classify_coupling(spec: ControlSpec) -> CouplingMode:
    """Decide whether per-point problems decouple under collocation.

    Decoupling needs the full-norm tracking functional, no variance
    penalty, a wholly stochastic control, and L2 regularisation; each
    violation is reported by the dominant cause.
    """
    if (spec.functional == "J1" and spec.beta == 0.0 and spec.epsilon == 0
            and spec.regularization == "L2"):
        return CouplingMode.DECOUPLED
    if spec.regularization == "H1":
        return CouplingMode.COUPLED_H1
    if spec.epsilon == 1:
        return CouplingMode.COUPLED_MEAN
    if spec.beta != 0.0:
        return CouplingMode.COUPLED_VARIANCE
    return CouplingMode.COUPLED_J2


@dataclass
class CollocSolution:
    """Per-point snapshots of the optimality-system solution."""

    grid: SparseGrid
    state: np.ndarray                # (P, N)
    adjoint: np.ndarray              # (P, N)
    control: np.ndarray | None       # (P, N) full control realisations
    control_mean: np.ndarray | None  # (N,) deterministic part when epsilon=1
    reports: tuple = ()

    def __post_init__(self):
        if self.state.shape[0] != len(self.grid):
            raise ValueError("snapshot count does not match grid size")


def _point_stiffness(ws: GalerkinWorkspace, y: np.ndarray) -> sp.csr_matrix:
    """Diffusion matrix at one parameter point.

    Assembly is linear in the centroid-sampled coefficient, so the matrix
    is the mean stiffness plus the parameter-weighted mode matrices.
    """
    out = ws.stiffness[0].copy()
    for kx, slot in zip(ws.stiffness[1:], ws.kappa.stochastic_slots):
        out = out + y[slot] * kx
    return out.tocsr()


def _deterministic_loads(spec: ControlSpec, ws: GalerkinWorkspace,
                         data: RhsData) -> np.ndarray:
    space = ws.space
    out = np.zeros(space.n_dofs)
    if data.fixed_source is not None:
        f = data.fixed_source
        if not callable(f):
            val = float(f)
            f = lambda x: np.full(len(x), val)  # noqa: E731
        out += space.restrict_vector(fem.load_vector(space.mesh, f))
    if data.neumann_data is not None:
        out += space.restrict_vector(
            fem.boundary_load_vector(space.mesh, data.neumann_data))
    return out


def _noise_mode_loads(spec: ControlSpec, ws: GalerkinWorkspace,
                      data: RhsData) -> tuple[np.ndarray, list]:
    """Per-KL-mode loads and slots of the prescribed control fluctuation."""
    space = ws.space
    if data.control_noise is None or spec.epsilon == 0:
        return np.zeros((0, space.n_dofs)), []
    loads = []
    slots = []
    for mode, slot in zip(data.control_noise.modes,
                          data.control_noise.stochastic_slots):
        if spec.channel == "boundary":
            b = fem.boundary_load_vector(space.mesh, mode.values)
        else:
            b = fem.load_vector(space.mesh, mode.values)
        loads.append(space.restrict_vector(b))
        slots.append(slot)
    return np.array(loads), slots


def _target_loads_at_points(ws: GalerkinWorkspace, target: TargetSpec,
                            grid: SparseGrid) -> np.ndarray:
    """Tracking-term loads per collocation point, shape (P, N)."""
    space = ws.space
    if target.kind == "callable":
        b = space.restrict_vector(
            fem.load_vector(space.mesh, target.fn, target.cut_lines))
        return np.tile(b, (len(grid), 1))
    snaps = target_snapshots(ws, target, grid)
    return (ws.mass @ snaps.T).T


def target_snapshots(ws: GalerkinWorkspace, target: TargetSpec,
                     grid: SparseGrid) -> np.ndarray:
    """Nodal target realisations at the grid points, shape (P, N)."""
    if target.kind == "callable":
        vals = ws.space.restrict_vector(
            fem.interpolate_nodal(ws.space.mesh, target.fn))
        return np.tile(vals, (len(grid), 1))
    if target.kind == "snapshots":
        if target.fld.n_blocks != len(grid):
            raise ValueError("snapshot target does not match the grid")
        return target.fld.data
    if grid.dim_count < ws.basis.dim_count:
        raise ValueError("grid dimension below the basis dimension")
    psi = ws.basis.eval_matrix(grid.points[:, :ws.basis.dim_count])
    return psi @ target.fld.data


def solve_decoupled(spec: ControlSpec, ws: GalerkinWorkspace, grid: SparseGrid,
                    data: RhsData, workers: int = 0) -> CollocSolution:
    """Independent per-point solves of the reduced optimality system.

    Each point gets a direct sparse factorisation; points may be solved
    concurrently without changing the (bitwise identical) results.
    """
    if classify_coupling(spec) is not CouplingMode.DECOUPLED:
        raise ValueError("problem couples the collocation points")
    space = ws.space
    nd = space.n_dofs
    mass_u = ws.mass if spec.channel == "distributive" else ws.boundary_mass
    cu = 1.0 / (spec.gamma if spec.channel == "distributive" else spec.delta)
    f_det = _deterministic_loads(spec, ws, data)
    b_tgt = _target_loads_at_points(ws, target=data.target, grid=grid)

    state = np.empty((len(grid), nd))
    adjoint = np.empty((len(grid), nd))

    def solve_point(i: int):
        k_pt = _point_stiffness(ws, grid.points[i])
        block = sp.bmat([[k_pt, cu * mass_u],
                         [-spec.alpha * ws.mass, k_pt]], format="csc")
        rhs = np.concatenate([f_det, -spec.alpha * b_tgt[i]])
        try:
            sol = splu(block).solve(rhs)
        except RuntimeError as exc:
            raise RuntimeError(f"collocation point {i} failed: {exc}") from exc
        state[i] = sol[:nd]
        adjoint[i] = sol[nd:]

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(solve_point, range(len(grid))))
    else:
        for i in range(len(grid)):
            solve_point(i)

    control = -adjoint * cu
    if spec.channel == "boundary":
        mask = np.zeros(nd, dtype=bool)
        mask[neumann_free_nodes(space)] = True
        control = control * mask
    return CollocSolution(grid, state, adjoint, control, None)


def coupled_operator(spec: ControlSpec, ws: GalerkinWorkspace,
                     grid: SparseGrid) -> OneShotOperator:
    """Block operator of the point-coupled collocation system.

    Diagonal blocks carry the per-point diffusion matrices; the coupling
    between points enters through cubature-weighted rank-one terms from
    the eliminated mean control and from moments in the cost.
    """
    if spec.regularization != "L2":
        raise ValueError("coupled collocation supports L2 regularisation only")
    p = len(grid)
    ones = np.ones(p)
    w = grid.weights
    mass_u = ws.mass if spec.channel == "distributive" else ws.boundary_mass
    cu = 1.0 / (spec.gamma if spec.channel == "distributive" else spec.delta)
    ks = [_point_stiffness(ws, y) for y in grid.points]

    terms = [Term.blockdiag(0, 0, ks), Term.blockdiag(1, 1, ks)]
    if spec.epsilon == 1:
        terms.append(Term.rankone(0, 1, ones, cu * w, mass_u))
    else:
        terms.append(Term.kron(0, 1, cu * np.eye(p), mass_u))
    if spec.functional == "J1":
        terms.append(Term.kron(1, 0, -(spec.alpha + spec.beta) * np.eye(p), ws.mass))
        if spec.beta != 0.0:
            terms.append(Term.rankone(1, 0, ones, spec.beta * w, ws.mass))
    else:
        terms.append(Term.kron(1, 0, -spec.beta * np.eye(p), ws.mass))
        terms.append(Term.rankone(1, 0, ones,
                                  (spec.beta - spec.alpha) * w, ws.mass))
    return OneShotOperator(2, p, ws.space.n_dofs, terms, spec,
                           meta={"form": "collocation", "mass_u": mass_u})


class PointBlockJacobi:
    """Block-Jacobi preconditioner from per-point direct factorisations."""

    name = "point_block_jacobi"

    def __init__(self, spec: ControlSpec, ws: GalerkinWorkspace,
                 grid: SparseGrid):
        mass_u = ws.mass if spec.channel == "distributive" else ws.boundary_mass
        cu = 1.0 / (spec.gamma if spec.channel == "distributive" else spec.delta)
        self.nd = ws.space.n_dofs
        self.p = len(grid)
        self._lus = []
        for y in grid.points:
            k_pt = _point_stiffness(ws, y)
            block = sp.bmat([[k_pt, cu * mass_u],
                             [-spec.alpha * ws.mass, k_pt]], format="csc")
            self._lus.append(splu(block))

    def apply(self, vec: np.ndarray) -> np.ndarray:
        blocks = np.asarray(vec, dtype=float).reshape(2, self.p, self.nd)
        out = np.empty_like(blocks)
        for i, lu in enumerate(self._lus):
            sol = lu.solve(np.concatenate([blocks[0, i], blocks[1, i]]))
            out[0, i] = sol[:self.nd]
            out[1, i] = sol[self.nd:]
        return out.ravel()


def solve_coupled(spec: ControlSpec, ws: GalerkinWorkspace, grid: SparseGrid,
                  data: RhsData, cfg: KrylovConfig | None = None
                  ) -> CollocSolution:
    """Krylov solve of the point-coupled collocation system."""
    mode = classify_coupling(spec)
    if mode is CouplingMode.COUPLED_H1:
        raise ValueError("H1 regularisation under collocation is unsupported")
    if mode is CouplingMode.DECOUPLED:
        raise ValueError("problem decouples; use solve_decoupled")
    space = ws.space
    nd = space.n_dofs
    p = len(grid)
    op = coupled_operator(spec, ws, grid)

    f_det = _deterministic_loads(spec, ws, data)
    noise_loads, noise_slots = _noise_mode_loads(spec, ws, data)
    b_tgt = _target_loads_at_points(ws, data.target, grid)
    if spec.functional == "J2":
        b_tgt = np.tile(b_tgt.T @ grid.weights, (p, 1))

    rhs = np.zeros((2, p, nd))
    rhs[0] = f_det
    for load, slot in zip(noise_loads, noise_slots):
        if slot >= grid.dim_count:
            raise ValueError(
                f"control-noise slot {slot} outside the {grid.dim_count}-dim grid")
        rhs[0] += np.outer(grid.points[:, slot], load)
    rhs[1] = -spec.alpha * b_tgt

    precond = PointBlockJacobi(spec, ws, grid)
    sol, report = krylov_solve(op, rhs.ravel(), precond,
                               cfg or KrylovConfig(method="general"))
    if not report.converged:
        raise RuntimeError(
            f"coupled collocation solve stalled at residual "
            f"{report.final_relative_residual:.3e}")
    blocks = sol.reshape(2, p, nd)
    state, adjoint = blocks[0].copy(), blocks[1].copy()

    cu = 1.0 / (spec.gamma if spec.channel == "distributive" else spec.delta)
    if spec.epsilon == 1:
        mean_ctrl = -cu * (adjoint.T @ grid.weights)
        control = np.tile(mean_ctrl, (p, 1))
        coords = space.coords()
        if data.control_noise is not None:
            for mode_fn, slot in zip(data.control_noise.modes,
                                     data.control_noise.stochastic_slots):
                control += np.outer(grid.points[:, slot], mode_fn.values(coords))
    else:
        mean_ctrl = None
        control = -cu * adjoint
    if spec.channel == "boundary":
        mask = np.zeros(nd, dtype=bool)
        mask[neumann_free_nodes(space)] = True
        control = control * mask
        if mean_ctrl is not None:
            mean_ctrl = mean_ctrl * mask
    return CollocSolution(grid, state, adjoint, control, mean_ctrl, (report,))


def reconstruct(solution: CollocSolution, y, which: str = "state") -> np.ndarray:
    """Evaluate the sparse interpolant of a snapshot family at ``y``."""
    snaps = {"state": solution.state, "adjoint": solution.adjoint,
             "control": solution.control}[which]
    if snaps is None:
        raise ValueError(f"no {which} snapshots available")
    wts = interp_weights(solution.grid, y)
    return snaps.T @ wts


def colloc_moments(solution: CollocSolution,
                   which: str = "state") -> tuple[np.ndarray, np.ndarray]:
    """Cubature mean and pointwise variance of a snapshot family."""
    snaps = {"state": solution.state, "adjoint": solution.adjoint,
             "control": solution.control}[which]
    w = solution.grid.weights
    mean = snaps.T @ w
    var = (snaps ** 2).T @ w - mean ** 2
    return mean, var


def colloc_cost(spec: ControlSpec, ws: GalerkinWorkspace,
                solution: CollocSolution, target: TargetSpec) -> CostBreakdown:
    """Cubature evaluation of the cost functional from snapshots."""
    mass = ws.mass
    w = solution.grid.weights
    z = solution.state
    mz = (mass @ z.T).T
    sq_all = float(np.einsum("p,pn,pn->", w, z, mz))
    zbar = z.T @ w
    sq_mean = float(zbar @ (mass @ zbar))
    std_sq = sq_all - sq_mean

    b_tgt = _target_loads_at_points(ws, target, solution.grid)
    if spec.functional == "J1":
        if target.kind == "callable":
            tgt_sq = target.sq_integral(ws.space, mass)
        else:
            snaps = target_snapshots(ws, target, solution.grid)
            tgt_sq = float(np.einsum("p,pn,pn->", w, snaps, (mass @ snaps.T).T))
        tracking = sq_all - 2.0 * float(np.einsum("p,pn,pn->", w, z, b_tgt)) + tgt_sq
    else:
        if target.kind == "callable":
            tgt_sq = target.sq_integral(ws.space, mass)
            bbar = b_tgt[0]
        else:
            snaps = target_snapshots(ws, target, solution.grid)
            tbar = snaps.T @ w
            tgt_sq = float(tbar @ (mass @ tbar))
            bbar = mass @ tbar
        tracking = sq_mean - 2.0 * float(zbar @ bbar) + tgt_sq
    tracking = max(tracking, 0.0)

    control_sq = 0.0
    boundary_sq = 0.0
    if solution.control is not None:
        u = solution.control
        if spec.channel == "distributive":
            control_sq = float(np.einsum("p,pn,pn->", w, u, (mass @ u.T).T))
        else:
            mb = ws.boundary_mass
            boundary_sq = float(np.einsum("p,pn,pn->", w, u, (mb @ u.T).T))

    total = (0.5 * spec.alpha * tracking + 0.5 * spec.beta * std_sq
             + 0.5 * spec.gamma * control_sq + 0.5 * spec.delta * boundary_sq)
    return CostBreakdown(total, tracking, std_sq, control_sq, boundary_sq)


def write_snapshots_csv(solution: CollocSolution, coords: np.ndarray,
                        directory, which: str = "state") -> None:
    """Dump per-point nodal snapshots, one CSV per collocation point."""
    snaps = {"state": solution.state, "adjoint": solution.adjoint,
             "control": solution.control}[which]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(len(solution.grid)):
        fem.write_nodal_csv(directory / f"{which}_{i:04d}.csv", coords, snaps[i])


def write_weight_table(grid: SparseGrid, path) -> None:
    """Export collocation points and cubature weights as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"y{d+1}" for d in range(grid.dim_count)] + ["weight"])
        for pt, wt in zip(grid.points, grid.weights):
            writer.writerow([f"{v:.16g}" for v in pt] + [f"{wt:.16g}"])

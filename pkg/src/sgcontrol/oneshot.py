"""One-shot coupled systems for elliptic control under uncertainty.

The state, adjoint and (for H1 regularisation) control unknowns are
expanded in a P1-in-space, polynomial-chaos-in-parameter tensor basis.
Stationarity of the Lagrangian then yields one coupled block-linear
system per problem, assembled here in matrix-free Kronecker form:

* L2 regularisation eliminates the control and couples state and adjoint
  in a ``2 N Q`` system;
* H1 regularisation keeps the control explicit in a symmetric ``3 N Q``
  saddle system.

All blocks act on the free-dof space of :class:`~sgcontrol.fem.FeSpace`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem, gpc
from .randfield import KlField

FUNCTIONALS = ("J1", "J2")
REGULARIZATIONS = ("L2", "H1")
CHANNELS = ("distributive", "boundary")


@dataclass(frozen=True)
class ControlSpec:
    """Penalty weights and structural switches of one control problem.

    ``epsilon`` selects whether the whole stochastic control is unknown
    (0) or only its deterministic mean part (1, with a prescribed
    zero-mean fluctuation).
    """

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1e-3
    delta: float = 0.0
    epsilon: int = 0
    functional: str = "J1"
    regularization: str = "L2"
    channel: str = "distributive"

    def __post_init__(self):
        if self.functional not in FUNCTIONALS:
            raise ValueError(f"unknown functional {self.functional!r}")
        if self.regularization not in REGULARIZATIONS:
            raise ValueError(f"unknown regularization {self.regularization!r}")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.epsilon not in (0, 1):
            raise ValueError("epsilon must be 0 or 1")
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("penalty weights must be non-negative")
        if self.channel == "distributive" and self.gamma <= 0:
            raise ValueError("distributive control requires gamma > 0")
        if self.channel == "boundary" and self.delta <= 0:
            raise ValueError("boundary control requires delta > 0")


def mean_first_diag(a: float, b: float, n: int) -> np.ndarray:
    """Diagonal ``[a, a+b, ..., a+b]`` separating the mean basis entry."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.full(n, a + b)
    out[0] = a
    return out


class StochasticField:
    """Coefficient block-vector over the space-parameter tensor basis.

    Stored as a ``(Q, N)`` array; block ``0`` corresponds to the constant
    polynomial and is the mean.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("expected a (Q, N) coefficient array")

    @classmethod
    def zeros(cls, n_blocks: int, n_dofs: int) -> "StochasticField":
        return cls(np.zeros((n_blocks, n_dofs)))

    @classmethod
    def deterministic(cls, values: np.ndarray, n_blocks: int) -> "StochasticField":
        values = np.asarray(values, dtype=float)
        data = np.zeros((n_blocks, values.size))
        data[0] = values
        return cls(data)

    @property
    def n_blocks(self) -> int:
        return self.data.shape[0]

    @property
    def n_dofs(self) -> int:
        return self.data.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.data[0]

    def flat(self) -> np.ndarray:
        return self.data.ravel()

    @classmethod
    def from_flat(cls, vec: np.ndarray, n_blocks: int) -> "StochasticField":
        vec = np.asarray(vec, dtype=float)
        return cls(vec.reshape(n_blocks, -1))

    def copy(self) -> "StochasticField":
        return StochasticField(self.data.copy())

    def weighted_norm_sq(self, mat: sp.spmatrix) -> float:
        """Sum of per-block quadratic forms; the squared tensor L2 norm."""
        return float(np.einsum("qn,qn->", self.data, (mat @ self.data.T).T))


def moments(fld: StochasticField) -> tuple[np.ndarray, np.ndarray]:
    """Nodal mean and pointwise variance from orthonormal coefficients."""
    mean = fld.data[0].copy()
    var = np.einsum("qn,qn->n", fld.data[1:], fld.data[1:])
    return mean, var


# -- targets -----------------------------------------------------------------

@dataclass(frozen=True)
class TargetSpec:
    """Prescribed tracking target, analytic or discrete.

    ``kind == "callable"`` wraps a deterministic spatial function with
    optional horizontal discontinuity lines and, when known, the exact
    integral of its square (used so tracking errors account for the part
    of the target outside the FE space).  ``kind == "field"`` wraps a
    coefficient field from a forward solve; zero non-mean blocks make it
    deterministic.  ``kind == "snapshots"`` holds per-collocation-point
    realisations and is meaningful to the collocation routines only.
    """

    kind: str
    fn: object = None
    cut_lines: tuple = ()
    exact_sq_integral: float | None = None
    fld: StochasticField = None

    @classmethod
    def from_callable(cls, fn, cut_lines=(), exact_sq_integral=None) -> "TargetSpec":
        return cls("callable", fn=fn, cut_lines=tuple(cut_lines),
                   exact_sq_integral=exact_sq_integral)

    @classmethod
    def from_field(cls, fld: StochasticField) -> "TargetSpec":
        return cls("field", fld=fld)

    def load_blocks(self, space: fem.FeSpace, mass: sp.spmatrix,
                    n_blocks: int) -> np.ndarray:
        """Per-block functionals of the target against the FE basis."""
        if self.kind == "snapshots":
            raise ValueError("snapshot targets apply to collocation runs only")
        if self.kind == "callable":
            out = np.zeros((n_blocks, space.n_dofs))
            b = fem.load_vector(space.mesh, self.fn, self.cut_lines)
            out[0] = space.restrict_vector(b)
            return out
        if self.fld.n_blocks > n_blocks:
            raise ValueError("target field has more blocks than the basis")
        out = np.zeros((n_blocks, space.n_dofs))
        out[: self.fld.n_blocks] = (mass @ self.fld.data.T).T
        return out

    def sq_integral(self, space: fem.FeSpace, mass: sp.spmatrix) -> float:
        """Squared tensor-L2 norm of the target itself."""
        if self.kind == "callable":
            if self.exact_sq_integral is not None:
                return self.exact_sq_integral
            return fem.integrate(space.mesh,
                                 lambda x: np.asarray(self.fn(x)) ** 2,
                                 self.cut_lines)
        return self.fld.weighted_norm_sq(mass)

    def mean_sq_integral(self, space: fem.FeSpace, mass: sp.spmatrix) -> float:
        """Squared L2 norm of the deterministic (mean) part of the target."""
        if self.kind == "callable":
            return self.sq_integral(space, mass)
        m = self.fld.mean
        return float(m @ (mass @ m))


# -- matrix-free block operator ----------------------------------------------

@dataclass(frozen=True)
class Term:
    """One additive contribution to a block operator.

    ``kind`` is ``"kron"`` (parameter matrix tensor spatial matrix),
    ``"blockdiag"`` (one spatial matrix per parameter block), or
    ``"rankone"`` (outer product of two parameter vectors tensor one
    spatial matrix).
    """

    row: int
    col: int
    kind: str = "kron"
    cq: np.ndarray = None          # (Q, Q) dense, kron terms
    kx: sp.spmatrix = None         # spatial matrix (kron / rankone)
    kx_list: tuple = None          # per-block spatial matrices, blockdiag
    u: np.ndarray = None           # (Q,) rankone
    v: np.ndarray = None           # (Q,) rankone
    cq_sp: sp.spmatrix = field(default=None, repr=False, compare=False)

    @staticmethod
    def kron(row, col, cq, kx) -> "Term":
        cq = np.asarray(cq, dtype=float)
        if cq.ndim == 1:
            cq = np.diag(cq)
        return Term(row, col, "kron", cq=cq, kx=kx.tocsr(),
                    cq_sp=sp.csr_matrix(cq))

    @staticmethod
    def blockdiag(row, col, kx_list) -> "Term":
        return Term(row, col, "blockdiag", kx_list=tuple(k.tocsr() for k in kx_list))

    @staticmethod
    def rankone(row, col, u, v, kx) -> "Term":
        return Term(row, col, "rankone", kx=kx.tocsr(),
                    u=np.asarray(u, dtype=float), v=np.asarray(v, dtype=float))

    def apply(self, xcol: np.ndarray, ycol: np.ndarray) -> None:
        """Accumulate the term action on block matrix ``xcol`` into ``ycol``."""
        if self.kind == "kron":
            ycol += self.cq_sp @ (self.kx @ xcol.T).T
        elif self.kind == "blockdiag":
            for q, kq in enumerate(self.kx_list):
                ycol[q] += kq @ xcol[q]
        else:
            s = self.v @ xcol
            ycol += np.outer(self.u, self.kx @ s)

    def to_sparse(self, n_blocks: int) -> sp.spmatrix:
        if self.kind == "kron":
            return sp.kron(self.cq_sp, self.kx, format="csr")
        if self.kind == "blockdiag":
            return sp.block_diag(self.kx_list, format="csr")
        return sp.kron(sp.csr_matrix(np.outer(self.u, self.v)), self.kx,
                       format="csr")


class OneShotOperator:
    """Matrix-free coupled operator with ``n_comp`` blocks of ``Q x N``.

    The unknown layout is component-major then parameter-block-major:
    state blocks, then (saddle form only) control blocks, then adjoint
    blocks.
    """

    def __init__(self, n_comp: int, n_blocks: int, n_dofs: int,
                 terms: list[Term], spec: ControlSpec = None, meta: dict = None):
        self.n_comp = n_comp
        self.n_blocks = n_blocks
        self.n_dofs = n_dofs
        self.terms = tuple(terms)
        self.spec = spec
        self.meta = dict(meta or {})

    @property
    def size(self) -> int:
        return self.n_comp * self.n_blocks * self.n_dofs

    @property
    def shape(self) -> tuple[int, int]:
        return (self.size, self.size)

    def apply_blocks(self, x: np.ndarray) -> np.ndarray:
        x = x.reshape(self.n_comp, self.n_blocks, self.n_dofs)
        y = np.zeros_like(x)
        for t in self.terms:
            t.apply(x[t.col], y[t.row])
        return y

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        return self.apply_blocks(np.asarray(vec, dtype=float)).ravel()

    def __matmul__(self, vec: np.ndarray) -> np.ndarray:
        return self.matvec(vec)

    def to_sparse(self) -> sp.csr_matrix:
        """Explicit sparse assembly; intended for small instances."""
        nb = self.n_blocks * self.n_dofs
        blocks = [[None] * self.n_comp for _ in range(self.n_comp)]
        for t in self.terms:
            contrib = t.to_sparse(self.n_blocks)
            cur = blocks[t.row][t.col]
            blocks[t.row][t.col] = contrib if cur is None else cur + contrib
        for r in range(self.n_comp):
            for c in range(self.n_comp):
                if blocks[r][c] is None:
                    blocks[r][c] = sp.csr_matrix((nb, nb))
        return sp.bmat(blocks, format="csr")

    def as_linear_operator(self):
        from scipy.sparse.linalg import LinearOperator
        return LinearOperator(self.shape, matvec=self.matvec, dtype=float)

    def node_block_diagonals(self) -> np.ndarray:
        """Node-local coupling blocks, shape ``(N, C*Q, C*Q)``.

        Entry ``[i]`` couples all components and parameter blocks living
        at spatial dof ``i``; off-node couplings are excluded.  This is
        the block a collective smoother inverts per node.
        """
        q = self.n_blocks
        b = self.n_comp * q
        out = np.zeros((self.n_dofs, b, b))
        for t in self.terms:
            r0, c0 = t.row * q, t.col * q
            if t.kind == "kron":
                d = t.kx.diagonal()
                out[:, r0:r0 + q, c0:c0 + q] += d[:, None, None] * t.cq[None]
            elif t.kind == "blockdiag":
                for qi, kq in enumerate(t.kx_list):
                    out[:, r0 + qi, c0 + qi] += kq.diagonal()
            else:
                d = t.kx.diagonal()
                out[:, r0:r0 + q, c0:c0 + q] += (
                    d[:, None, None] * np.outer(t.u, t.v)[None])
        return out


# -- assembled ingredients ----------------------------------------------------

@dataclass(frozen=True)
class GalerkinWorkspace:
    """Per-problem matrices shared by assembly, solvers and cost evaluation."""

    space: fem.FeSpace
    basis: gpc.GpcBasis
    kappa: KlField
    mass: sp.csr_matrix
    boundary_mass: sp.csr_matrix
    stiffness: tuple        # one per expansion term of kappa, mean first
    couplings: tuple        # matching parameter Gram matrices, identity first


def build_workspace(space: fem.FeSpace, basis: gpc.GpcBasis,
                    kappa: KlField) -> GalerkinWorkspace:
    mesh = space.mesh
    mass = fem.assemble_mass(space)
    bmass = fem.assemble_boundary_mass(space)
    ks = [fem.assemble_stiffness(space, kappa.mean_value)]
    cs = [gpc.coupling_matrix(basis, None)]
    for mode, slot in zip(kappa.modes, kappa.stochastic_slots):
        ks.append(fem.assemble_stiffness(space, mode.values))
        cs.append(gpc.coupling_matrix(basis, slot))
    return GalerkinWorkspace(space, basis, kappa, mass, bmass,
                             tuple(ks), tuple(cs))


def noise_blocks(noise: KlField | None, space: fem.FeSpace,
                 basis: gpc.GpcBasis, boundary: bool = False) -> np.ndarray:
    """Load functionals of a prescribed zero-mean control fluctuation.

    Each KL mode of the fluctuation drives the degree-one basis
    polynomial of its parameter slot, so its load lands in that block.
    """
    q = basis.size
    out = np.zeros((q, space.n_dofs))
    if noise is None:
        return out
    for mode, slot in zip(noise.modes, noise.stochastic_slots):
        if slot >= basis.dim_count:
            raise ValueError(f"noise slot {slot} outside basis dimensions")
        mi = np.zeros(basis.dim_count, dtype=int)
        mi[slot] = 1
        block = basis.position(mi)
        if boundary:
            b = fem.boundary_load_vector(space.mesh, mode.values)
        else:
            b = fem.load_vector(space.mesh, mode.values)
        out[block] = space.restrict_vector(b)
    return out


def noise_coefficients(noise: KlField | None, space: fem.FeSpace,
                       basis: gpc.GpcBasis) -> StochasticField:
    """Nodal-interpolant coefficient field of a prescribed fluctuation."""
    q = basis.size
    data = np.zeros((q, space.n_dofs))
    if noise is not None:
        coords = space.coords()
        for mode, slot in zip(noise.modes, noise.stochastic_slots):
            mi = np.zeros(basis.dim_count, dtype=int)
            mi[slot] = 1
            data[basis.position(mi)] = mode.values(coords)
    return StochasticField(data)


def tracking_coupling(spec: ControlSpec, n_blocks: int) -> np.ndarray:
    """Adjoint-row coupling diagonal in the parameter blocks.

    The two cost functionals differ only in how the mean block is
    weighted against the fluctuation blocks.
    """
    if spec.functional == "J1":
        return mean_first_diag(-spec.alpha, -spec.beta, n_blocks)
    return mean_first_diag(-spec.alpha, spec.alpha - spec.beta, n_blocks)


def control_coupling(spec: ControlSpec, n_blocks: int) -> np.ndarray:
    """State-row coupling diagonal produced by eliminating the control."""
    weight = spec.gamma if spec.channel == "distributive" else spec.delta
    return mean_first_diag(1.0 / weight, -spec.epsilon / weight, n_blocks)


@dataclass(frozen=True)
class RhsData:
    """Optional problem data entering the right-hand side."""

    target: TargetSpec
    control_noise: KlField | None = None    # prescribed fluctuation of u or g
    fixed_source: object = None             # prescribed deterministic source
    neumann_data: object = None             # prescribed deterministic flux


def _state_loads(spec: ControlSpec, space: fem.FeSpace, basis: gpc.GpcBasis,
                 data: RhsData) -> np.ndarray:
    q = basis.size
    loads = np.zeros((q, space.n_dofs))
    if data.fixed_source is not None:
        f = data.fixed_source
        if not callable(f):
            val = float(f)
            f = lambda x: np.full(len(x), val)  # noqa: E731
        loads[0] += space.restrict_vector(fem.load_vector(space.mesh, f))
    if data.neumann_data is not None:
        loads[0] += space.restrict_vector(
            fem.boundary_load_vector(space.mesh, data.neumann_data))
    if spec.epsilon == 1 and data.control_noise is not None:
        loads += noise_blocks(data.control_noise, space, basis,
                              boundary=spec.channel == "boundary")
    return loads


def reduced_operator(spec: ControlSpec, ws: GalerkinWorkspace) -> OneShotOperator:
    """Coupled state-adjoint operator with the control eliminated.

    Unknown ordering is all state blocks then all adjoint blocks.
    """
    if spec.regularization != "L2":
        raise ValueError("reduced form requires L2 regularization")
    q = ws.basis.size
    mass_u = ws.mass if spec.channel == "distributive" else ws.boundary_mass
    terms = []
    for cq, kx in zip(ws.couplings, ws.stiffness):
        terms.append(Term.kron(0, 0, cq, kx))
        terms.append(Term.kron(1, 1, cq, kx))
    terms.append(Term.kron(0, 1, control_coupling(spec, q), mass_u))
    terms.append(Term.kron(1, 0, tracking_coupling(spec, q), ws.mass))
    return OneShotOperator(2, q, ws.space.n_dofs, terms, spec,
                           meta={"form": "reduced", "mass_u": mass_u})


def assemble_reduced(spec: ControlSpec, ws: GalerkinWorkspace,
                     data: RhsData) -> tuple[OneShotOperator, np.ndarray]:
    """Reduced operator plus its flat right-hand side of length ``2 N Q``."""
    op = reduced_operator(spec, ws)
    q = ws.basis.size
    rhs = np.zeros((2, q, ws.space.n_dofs))
    rhs[0] = _state_loads(spec, ws.space, ws.basis, data)
    tgt = data.target.load_blocks(ws.space, ws.mass, q)
    if spec.functional == "J2":
        tgt[1:] = 0.0
    rhs[1] = -spec.alpha * tgt
    return op, rhs.ravel()


def saddle_operator(spec: ControlSpec, ws: GalerkinWorkspace) -> OneShotOperator:
    """Symmetric saddle operator keeping the H1-regularised control explicit.

    Unknown ordering is state, control, adjoint; only the distributive
    channel with a wholly stochastic control is supported.
    """
    if spec.regularization != "H1":
        raise ValueError("saddle form requires H1 regularization")
    if spec.channel != "distributive":
        raise ValueError("H1 boundary control is not supported")
    if spec.epsilon != 0:
        raise ValueError("saddle form requires a wholly stochastic control")
    q = ws.basis.size
    grad_gram = gpc.gradient_matrix(ws.basis)
    k_unit = fem.assemble_stiffness(ws.space, 1.0)
    h1_space = (ws.mass + k_unit).tocsr()
    h1_param = np.eye(q) + grad_gram

    terms = [Term.kron(0, 0, mean_first_diag(spec.alpha, spec.beta, q), ws.mass),
             Term.kron(1, 1, spec.gamma * h1_param, h1_space),
             Term.kron(1, 2, np.eye(q), ws.mass),
             Term.kron(2, 1, np.eye(q), ws.mass)]
    for cq, kx in zip(ws.couplings, ws.stiffness):
        terms.append(Term.kron(0, 2, -cq, kx))
        terms.append(Term.kron(2, 0, -cq, kx))
    return OneShotOperator(3, q, ws.space.n_dofs, terms, spec,
                           meta={"form": "saddle"})


def assemble_saddle(spec: ControlSpec, ws: GalerkinWorkspace,
                    data: RhsData) -> tuple[OneShotOperator, np.ndarray]:
    """Saddle operator plus its flat right-hand side of length ``3 N Q``."""
    op = saddle_operator(spec, ws)
    q = ws.basis.size
    rhs = np.zeros((3, q, ws.space.n_dofs))
    tgt = data.target.load_blocks(ws.space, ws.mass, q)
    if spec.functional == "J2":
        tgt[1:] = 0.0
    rhs[0] = spec.alpha * tgt
    rhs[2] = -_state_loads(spec, ws.space, ws.basis, data)
    return op, rhs.ravel()


def neumann_free_nodes(space: fem.FeSpace) -> np.ndarray:
    """Free-dof indices lying on the Neumann boundary."""
    mesh = space.mesh
    onb = np.zeros(mesh.n_nodes, dtype=bool)
    onb[mesh.neumann_edges.ravel()] = True
    return np.flatnonzero(onb[space.free_nodes])


def recover_control(spec: ControlSpec, lam: StochasticField,
                    space: fem.FeSpace) -> StochasticField:
    """Unknown control component from the adjoint via the optimality relation.

    For a wholly stochastic control every block is scaled; with only the
    mean unknown just the mean block survives.  Boundary controls live on
    the Neumann trace, so off-boundary dofs stay zero.
    """
    if spec.regularization != "L2":
        raise ValueError("H1-regularised controls are explicit unknowns")
    weight = spec.gamma if spec.channel == "distributive" else spec.delta
    if weight <= 0:
        raise ValueError("control weight must be positive")
    out = np.zeros_like(lam.data)
    if spec.epsilon == 0:
        out[:] = -lam.data / weight
    else:
        out[0] = -lam.data[0] / weight
    if spec.channel == "boundary":
        mask = np.zeros(lam.n_dofs, dtype=bool)
        mask[neumann_free_nodes(space)] = True
        out[:, ~mask] = 0.0
    return StochasticField(out)


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    tracking: float
    std_sq: float
    control_sq: float
    boundary_sq: float


def eval_cost(spec: ControlSpec, ws: GalerkinWorkspace, z: StochasticField,
              u: StochasticField | None, g: StochasticField | None,
              target: TargetSpec) -> CostBreakdown:
    """Cost functional value and its reported components.

    ``tracking`` follows the active functional: the full tensor-norm
    distance for J1, the distance of the mean for J2.  ``std_sq`` is the
    squared L2 norm of the pointwise standard deviation.  Under H1
    regularisation the control penalty uses the tensor H1 norm.
    """
    mass = ws.mass
    space = ws.space
    loads = target.load_blocks(space, mass, z.n_blocks)

    sq_all = z.weighted_norm_sq(mass)
    mean_m = mass @ z.mean
    sq_mean = float(z.mean @ mean_m)
    std_sq = sq_all - sq_mean

    if spec.functional == "J1":
        tracking = (sq_all - 2.0 * float(np.sum(z.data * loads))
                    + target.sq_integral(space, mass))
    else:
        tracking = (sq_mean - 2.0 * float(z.mean @ loads[0])
                    + target.mean_sq_integral(space, mass))
    tracking = max(tracking, 0.0)

    if u is None:
        control_sq = 0.0
    elif spec.regularization == "H1":
        control_sq = _h1_tensor_norm_sq(ws, u)
    else:
        control_sq = u.weighted_norm_sq(mass)
    boundary_sq = g.weighted_norm_sq(ws.boundary_mass) if g is not None else 0.0

    total = (0.5 * spec.alpha * tracking + 0.5 * spec.beta * std_sq
             + 0.5 * spec.gamma * control_sq + 0.5 * spec.delta * boundary_sq)
    return CostBreakdown(total, tracking, std_sq, control_sq, boundary_sq)


def _h1_tensor_norm_sq(ws: GalerkinWorkspace, u: StochasticField) -> float:
    """Squared norm in the tensor H1 space of domain and parameters."""
    h1_space = (ws.mass + fem.assemble_stiffness(ws.space, 1.0)).tocsr()
    h1_param = np.eye(ws.basis.size) + gpc.gradient_matrix(ws.basis)
    mixed = (h1_space @ u.data.T).T
    return float(np.einsum("qr,qn,rn->", h1_param, u.data, mixed))


def forward_solve(ws: GalerkinWorkspace, source_loads: np.ndarray,
                  rel_tol: float = 1e-12) -> StochasticField:
    """Solve the constraint equation alone for given per-block loads.

    Uses conjugate gradients on the positive definite diffusion blocks
    with a mean-coefficient block preconditioner.
    """
    from scipy.sparse.linalg import cg, splu, LinearOperator

    q = ws.basis.size
    nd = ws.space.n_dofs
    terms = [Term.kron(0, 0, cq, kx)
             for cq, kx in zip(ws.couplings, ws.stiffness)]
    op = OneShotOperator(1, q, nd, terms)
    lu = splu(ws.stiffness[0].tocsc())

    def prec(vec):
        return lu.solve(vec.reshape(q, nd).T).T.ravel()

    A = LinearOperator((q * nd, q * nd), matvec=op.matvec)
    M = LinearOperator((q * nd, q * nd), matvec=prec)
    sol, info = cg(A, source_loads.ravel(), rtol=rel_tol, maxiter=2000, M=M)
    if info != 0:
        raise RuntimeError(f"forward solve did not converge (info={info})")
    return StochasticField.from_flat(sol, q)

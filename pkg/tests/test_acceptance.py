"""Acceptance suite: one test per criterion, each printing a verdict line.

Criteria 4, 5 and 10 run at the full experiment resolution (2^7 mesh,
seven KL terms, order-two chaos) and together take several minutes on one
core; everything else runs in seconds.  Run with ``pytest -s`` to see the
verdict lines as they appear.
"""

import math
import sys
import time

import numpy as np
import pytest
from scipy.sparse.linalg import splu

from sgcontrol import colloc, fem, gpc, oneshot, scenarios, solve
from sgcontrol.colloc import CouplingMode
from sgcontrol.oneshot import ControlSpec, StochasticField
from sgcontrol.randfield import CovarianceSpec, kl_expand


def report(criterion: int, ok: bool, detail: str) -> None:
    verdict = "PASS" if ok else "FAIL"
    # write past pytest's capture so the verdict lines always show
    print(f"[criterion {criterion:2d}] {verdict}: {detail}",
          file=sys.__stdout__, flush=True)
    assert ok, f"criterion {criterion}: {detail}"


def rel_err(value: float, reference: float) -> float:
    return abs(value - reference) / abs(reference)


# -- shared paper-scale configurations ----------------------------------------

PAPER = dict(n=128, kl_terms=7, order=2, variance=0.25, corr_length=1.0,
             kappa_mean=1.0)
SMALL = dict(n=32, kl_terms=3, order=2, variance=0.25, corr_length=1.0,
             kappa_mean=1.0)


def test_criterion_01_cardinalities():
    t0 = time.perf_counter()
    q = gpc.build_basis(7, 2).size
    pts = len(gpc.build_sparse_grid(7, 2))
    elapsed = time.perf_counter() - t0
    ok = q == 36 and pts == 141 and elapsed < 1.0
    report(1, ok, f"Q={q} (want 36), grid points={pts} (want 141), "
                  f"{elapsed:.2f}s")


def _factorised_gradient_oracle(basis):
    """Quadrature-based gradient Gram, independent of the closed forms.

    1D integrals come from Gauss quadrature; they combine over dimensions
    through the product structure of the tensor basis, which keeps the
    oracle feasible for any dimension count.
    """
    p = basis.total_degree
    q = basis.size
    idx = basis.index_set
    dims = basis.dim_count
    gram_tab, der_tab = [], []
    for fam in basis.families:
        x, w = gpc.gauss_rule(fam, p + 3)
        vals = gpc.family_values(fam, p, x)
        ders = gpc.family_derivatives(fam, p, x)
        gram_tab.append((vals * w[:, None]).T @ vals)
        der_tab.append((ders * w[:, None]).T @ ders)
    gq = [gram_tab[d][np.ix_(idx[:, d], idx[:, d])] for d in range(dims)]
    dq = [der_tab[d][np.ix_(idx[:, d], idx[:, d])] for d in range(dims)]
    prefix = [np.ones((q, q))]
    for d in range(dims - 1):
        prefix.append(prefix[-1] * gq[d])
    suffix = [np.ones((q, q))]
    for d in range(dims - 1, 0, -1):
        suffix.append(suffix[-1] * gq[d])
    suffix.reverse()
    out = np.zeros((q, q))
    for d in range(dims):
        out += prefix[d] * dq[d] * suffix[d]
    return out


def _tensor_gradient_oracle(basis):
    p = basis.total_degree
    rules = [gpc.gauss_rule(f, p + 3) for f in basis.families]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    w = rules[0][1]
    for r in rules[1:]:
        w = np.multiply.outer(w, r[1])
    w = w.ravel()
    vals = [gpc.family_values(f, p, pts[:, d])
            for d, f in enumerate(basis.families)]
    ders = [gpc.family_derivatives(f, p, pts[:, d])
            for d, f in enumerate(basis.families)]
    idx = basis.index_set
    out = np.zeros((basis.size, basis.size))
    for d in range(basis.dim_count):
        fac = np.ones((pts.shape[0], basis.size))
        for t in range(basis.dim_count):
            table = ders[t] if t == d else vals[t]
            fac *= table[:, idx[:, t]]
        out += (fac * w[:, None]).T @ fac
    return out


def test_criterion_02_gradient_gram_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for family in gpc.FAMILIES:
        for dims in range(1, 17):
            for degree in range(0, 17):
                if math.comb(dims + degree, dims) > 200:
                    break
                basis = gpc.build_basis(dims, degree, family)
                closed = gpc.gradient_matrix(basis)
                worst = max(worst, np.abs(
                    closed - _factorised_gradient_oracle(basis)).max())
                if dims <= 3:
                    worst = max(worst, np.abs(
                        closed - _tensor_gradient_oracle(basis)).max())
                count += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 30.0
    report(2, ok, f"{count} bases, max |closed - quadrature| = {worst:.2e} "
                  f"(tol 1e-10), {elapsed:.1f}s")


def test_criterion_03_dense_kronecker_equivalence():
    space = fem.build_space(fem.build_mesh(5))          # 24 free dofs
    basis = gpc.build_basis(2, 2, "legendre")            # Q = 6
    kappa = kl_expand(CovarianceSpec(0.25, 1.0), 2, 1.0)
    ws = oneshot.build_workspace(space, basis, kappa)
    rng = np.random.default_rng(123)
    worst = 0.0

    kk = sum(np.kron(c, k.toarray()) for c, k in zip(ws.couplings, ws.stiffness))
    nq = space.n_dofs * basis.size
    for spec in (ControlSpec(alpha=1.0, beta=0.5, gamma=1e-2),
                 ControlSpec(alpha=1.0, beta=0.0, gamma=1e-2, epsilon=1),
                 ControlSpec(alpha=0.7, beta=0.3, gamma=1e-2, functional="J2")):
        dense = np.zeros((2 * nq, 2 * nq))
        dense[:nq, :nq] = kk
        dense[nq:, nq:] = kk
        dense[:nq, nq:] = np.kron(np.diag(oneshot.control_coupling(
            spec, basis.size)), ws.mass.toarray())
        dense[nq:, :nq] = np.kron(np.diag(oneshot.tracking_coupling(
            spec, basis.size)), ws.mass.toarray())
        op = oneshot.reduced_operator(spec, ws)
        v = rng.standard_normal(op.size)
        ref = dense @ v
        worst = max(worst, np.abs(op.matvec(v) - ref).max()
                    / max(1.0, np.abs(ref).max()))

    spec = ControlSpec(alpha=1.0, beta=0.3, gamma=1e-2, regularization="H1")
    grad = gpc.gradient_matrix(basis)
    k_unit = fem.assemble_stiffness(space, 1.0).toarray()
    mass = ws.mass.toarray()
    dense = np.zeros((3 * nq, 3 * nq))
    dense[:nq, :nq] = np.kron(np.diag(oneshot.mean_first_diag(
        spec.alpha, spec.beta, basis.size)), mass)
    dense[nq:2 * nq, nq:2 * nq] = spec.gamma * np.kron(
        np.eye(basis.size) + grad, mass + k_unit)
    dense[:nq, 2 * nq:] = -kk
    dense[2 * nq:, :nq] = -kk
    dense[nq:2 * nq, 2 * nq:] = np.kron(np.eye(basis.size), mass)
    dense[2 * nq:, nq:2 * nq] = np.kron(np.eye(basis.size), mass)
    op = oneshot.saddle_operator(spec, ws)
    v = rng.standard_normal(op.size)
    ref = dense @ v
    worst = max(worst, np.abs(op.matvec(v) - ref).max()
                / max(1.0, np.abs(ref).max()))

    report(3, worst <= 1e-12,
           f"reduced+saddle vs dense Kronecker, scaled max diff = {worst:.2e} "
           f"(tol 1e-12)")


@pytest.fixture(scope="module")
def paper_control_rows():
    cfg = scenarios.ScenarioConfig(
        scenario="acc_t1", solver="multigrid", mg_coarse_n=8, rel_tol=1e-8,
        alpha=1.0, beta=0.0, gamma=1e-5, epsilon=1, target="control", **PAPER)
    prob = scenarios.build_problem(cfg)
    row5 = scenarios.run_prepared(prob, write_outputs=False)
    row3 = scenarios.run_prepared(prob, gamma=1e-3, write_outputs=False)
    return row5, row3


def test_criterion_04_table_reproduction_control(paper_control_rows):
    row5, row3 = paper_control_rows
    checks = [
        (row5.cost, 2.083e-1), (row5.tracking, 4.022e-1),
        (row5.std_sq, 2.562e-1),
        (row3.cost, 2.911e-1), (row3.tracking, 5.078e-1),
        (row3.std_sq, 1.845e-1),
    ]
    errs = [rel_err(v, ref) for v, ref in checks]
    ok = max(errs) <= 0.02
    report(4, ok,
           "distributive control at full scale: "
           f"J=({row5.cost:.4e}, {row3.cost:.4e}) vs (2.083e-1, 2.911e-1); "
           f"max rel err = {max(errs):.3%} (tol 2%)")


@pytest.fixture(scope="module")
def paper_inverse_rows():
    rows = {}
    for method in ("galerkin", "collocation"):
        cfg = scenarios.ScenarioConfig(
            scenario=f"acc_t3_{method}", method=method,
            solver="multigrid" if method == "galerkin" else "direct",
            mg_coarse_n=8, rel_tol=1e-10, colloc_level=2,
            alpha=1.0, beta=0.0, gamma=1e-5, epsilon=0,
            target="inverse_stochastic", **PAPER)
        prob = scenarios.build_problem(cfg)
        rows[method, 1e-5] = scenarios.run_prepared(prob, write_outputs=False)
        rows[method, 1e-8] = scenarios.run_prepared(prob, gamma=1e-8,
                                                    write_outputs=False)
    return rows


def test_criterion_05_inverse_cross_method(paper_inverse_rows):
    rows = paper_inverse_rows
    jg = rows["galerkin", 1e-5].cost
    jc = rows["collocation", 1e-5].cost
    err_g = rel_err(jg, 3.035e-3)
    err_c = rel_err(jc, 3.035e-3)
    cross = abs(jg - jc) / jg
    tr8 = max(rows["galerkin", 1e-8].tracking,
              rows["collocation", 1e-8].tracking)
    eu8 = max(rows["galerkin", 1e-8].e_u, rows["collocation", 1e-8].e_u)
    ok = (err_g <= 0.01 and err_c <= 0.01 and cross <= 0.005
          and tr8 <= 1e-9 and eu8 <= 1e-7)
    report(5, ok,
           f"J(galerkin)={jg:.4e}, J(colloc)={jc:.4e} vs 3.035e-3 "
           f"(rel {err_g:.3%}/{err_c:.3%}, cross {cross:.2e}); "
           f"tracking@1e-8={tr8:.2e} (tol 1e-9), e_u@1e-8={eu8:.2e} (tol 1e-7)")


def test_criterion_06_monotone_sweeps():
    t0 = time.perf_counter()
    gammas = tuple(10.0 ** k for k in range(-8, 0))
    ctl = scenarios.ScenarioConfig(
        scenario="acc_sweep_ctl", solver="multigrid", mg_coarse_n=8,
        rel_tol=1e-10, alpha=1.0, beta=0.0, epsilon=1, target="control",
        gammas=gammas, **SMALL)
    ctl_rows = scenarios.run_sweep(ctl, write_outputs=False)
    ctl_tracks = [r.tracking for r in ctl_rows]
    ctl_ok = all(a <= b * (1 + 1e-10) for a, b in zip(ctl_tracks, ctl_tracks[1:]))

    inv = scenarios.ScenarioConfig(
        scenario="acc_sweep_inv", solver="multigrid", mg_coarse_n=8,
        rel_tol=1e-12, alpha=1.0, beta=0.0, epsilon=0,
        target="inverse_stochastic", gammas=gammas, **SMALL)
    inv_rows = scenarios.run_sweep(inv, write_outputs=False)
    inv_tracks = [r.tracking for r in inv_rows]
    inv_ok = (all(a <= b * (1 + 1e-10) for a, b in
                  zip(inv_tracks, inv_tracks[1:]))
              and inv_tracks[0] < 1e-8)
    elapsed = time.perf_counter() - t0
    ok = ctl_ok and inv_ok and elapsed < 60.0
    report(6, ok,
           f"control tracking {ctl_tracks[0]:.3e}..{ctl_tracks[-1]:.3e} "
           f"non-decreasing={ctl_ok}; inverse tracking -> "
           f"{inv_tracks[0]:.1e} decreasing={inv_ok}; {elapsed:.0f}s")


def test_criterion_07_discrete_optimality_gradient():
    t0 = time.perf_counter()
    cfg = scenarios.ScenarioConfig(
        scenario="acc_fd", solver="multigrid", mg_coarse_n=8, rel_tol=1e-12,
        alpha=1.0, beta=0.0, gamma=1e-3, epsilon=1, target="control", **SMALL)
    prob = scenarios.build_problem(cfg)
    spec = cfg.control_spec()
    _op, x, _rep = scenarios._solve_galerkin(cfg, spec, prob)
    _z, lam, u = scenarios._galerkin_fields(cfg, spec, prob, x)

    ws = prob.ws
    q, nd = ws.basis.size, ws.space.n_dofs
    state_terms = [oneshot.Term.kron(0, 0, c, k)
                   for c, k in zip(ws.couplings, ws.stiffness)]
    state_op = oneshot.OneShotOperator(1, q, nd, state_terms)
    state_lu = splu(state_op.to_sparse().tocsc())

    def cost_of(udata):
        loads = (ws.mass @ udata.T).T
        z = StochasticField(state_lu.solve(loads.ravel()).reshape(q, nd))
        return oneshot.eval_cost(spec, ws, z, StochasticField(udata), None,
                                 prob.data.target).total

    rng = np.random.default_rng(2024)
    step = 1e-5
    worst = 0.0
    for _ in range(20):
        i = rng.integers(0, nd)
        up = u.data.copy()
        up[0, i] += step
        dn = u.data.copy()
        dn[0, i] -= step
        worst = max(worst, abs(cost_of(up) - cost_of(dn)) / (2 * step))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60.0
    report(7, ok, f"max |dJ/du_i| at optimum over 20 dofs = {worst:.2e} "
                  f"(tol 1e-4), {elapsed:.0f}s")


def test_criterion_08_multigrid_h_independence():
    t0 = time.perf_counter()
    iters = {}
    for n in (32, 128):
        cfg = scenarios.ScenarioConfig(
            scenario=f"acc_mg{n}", solver="multigrid", mg_coarse_n=8,
            rel_tol=1e-8, alpha=1.0, beta=0.0, gamma=1e-3, epsilon=0,
            target="control", n=n, kl_terms=3, order=2)
        prob = scenarios.build_problem(cfg)
        spec = cfg.control_spec()
        op, rhs = oneshot.assemble_reduced(spec, prob.ws, prob.data)
        mg = solve.CollectiveMultigrid(scenarios._mg_hierarchy(cfg, spec, prob))
        _, rep = solve.krylov_solve(op, rhs, mg,
                                    solve.KrylovConfig(rel_tol=1e-8))
        assert rep.converged
        iters[n] = rep.iterations
    spread = abs(iters[128] - iters[32]) / iters[32]
    elapsed = time.perf_counter() - t0
    ok = spread <= 0.5 and elapsed < 120.0
    report(8, ok, f"iterations n=32: {iters[32]}, n=128: {iters[128]}, "
                  f"spread {spread:.0%} (tol 50%), {elapsed:.0f}s")


def test_criterion_09_coupling_classification():
    table = [
        (ControlSpec(functional="J1", beta=0.0, epsilon=0, gamma=1e-3),
         CouplingMode.DECOUPLED),
        (ControlSpec(functional="J1", beta=0.0, epsilon=1, gamma=1e-3),
         CouplingMode.COUPLED_MEAN),
        (ControlSpec(functional="J1", beta=1.0, epsilon=0, gamma=1e-3),
         CouplingMode.COUPLED_VARIANCE),
        (ControlSpec(functional="J1", beta=1.0, epsilon=1, gamma=1e-3),
         CouplingMode.COUPLED_MEAN),
        (ControlSpec(functional="J2", beta=0.0, epsilon=0, gamma=1e-3),
         CouplingMode.COUPLED_J2),
        (ControlSpec(functional="J1", beta=0.0, epsilon=0, gamma=1e-3,
                     regularization="H1"), CouplingMode.COUPLED_H1),
    ]
    class_ok = all(colloc.classify_coupling(s) is m for s, m in table)

    # structural inspection: cross-point blocks of the assembled operator
    space = fem.build_space(fem.build_mesh(4))
    basis = gpc.build_basis(2, 2, "legendre")
    kappa = kl_expand(CovarianceSpec(0.25, 1.0), 2, 1.0)
    ws = oneshot.build_workspace(space, basis, kappa)
    grid = gpc.build_sparse_grid(2, 1)
    nd = space.n_dofs
    p = len(grid)

    def max_cross_block(spec):
        dense = colloc.coupled_operator(spec, ws, grid).to_sparse().toarray()
        worst = 0.0
        for i in range(p):
            for j in range(p):
                if i == j:
                    continue
                for r0, c0 in ((i, j), (i, p + j), (p + i, j), (p + i, p + j)):
                    sub = dense[r0 * nd:(r0 + 1) * nd, c0 * nd:(c0 + 1) * nd]
                    worst = max(worst, np.abs(sub).max())
        return worst

    dec = max_cross_block(ControlSpec(functional="J1", beta=0.0, epsilon=0,
                                      gamma=1e-3))
    cpl = min(max_cross_block(ControlSpec(functional="J1", beta=0.5,
                                          epsilon=0, gamma=1e-3)),
              max_cross_block(ControlSpec(functional="J1", beta=0.0,
                                          epsilon=1, gamma=1e-3)))
    struct_ok = dec == 0.0 and cpl > 0.0
    ok = class_ok and struct_ok
    report(9, ok, f"classification table ok={class_ok}; decoupled cross-blocks "
                  f"max={dec:.1e}, coupled cross-blocks min={cpl:.1e}")


def test_criterion_10_table_reproduction_boundary():
    cfg = scenarios.ScenarioConfig(
        scenario="acc_t2", solver="multigrid", mg_coarse_n=8, rel_tol=1e-8,
        alpha=1.0, beta=0.0, gamma=0.0, delta=1e-3, epsilon=1,
        channel="boundary", fixed_source=5.0, target="control", **PAPER)
    row = scenarios.run_prepared(scenarios.build_problem(cfg),
                                 write_outputs=False)
    # The benchmark boundary table's cost column satisfies
    # J = alpha/2 * tracking + beta/2 * std^2 exactly to all printed digits
    # on every row, i.e. it excludes the boundary-penalty term; compare the
    # same quantity.  The full cost (penalty included) is reported alongside.
    j_tabulated = 0.5 * row.tracking
    err_j = rel_err(j_tabulated, 2.711e-1)
    err_tr = rel_err(row.tracking, 5.421e-1)
    err_std = rel_err(row.std_sq, 2.091e-1)
    ok = err_j <= 0.02 and err_tr <= 0.02 and err_std <= 0.02
    report(10, ok,
           f"boundary control at full scale: tr/2={j_tabulated:.4e} "
           f"vs 2.711e-1 (rel {err_j:.3%}), tracking rel {err_tr:.3%}, "
           f"std^2 rel {err_std:.3%} (tol 2%); full cost with penalty term "
           f"J={row.cost:.4e}")

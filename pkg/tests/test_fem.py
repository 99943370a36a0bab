import math

import numpy as np
import pytest

from sgcontrol import fem


class TestMesh:
    def test_minimal_mesh(self):
        mesh = fem.build_mesh(1)
        assert mesh.n_nodes == 4
        assert mesh.cells.shape == (2, 3)

    def test_boundary_edge_counts(self):
        mesh = fem.build_mesh(4)
        assert mesh.dirichlet_edges.shape[0] + mesh.neumann_edges.shape[0] == 16
        assert mesh.dirichlet_edges.shape[0] == 8

    def test_cells_positively_oriented(self):
        mesh = fem.build_mesh(3)
        p = mesh.nodes[mesh.cells]
        cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                 - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        assert (cross > 0).all()

    def test_free_dof_count(self):
        # nodes on both vertical sides (corners included) are constrained,
        # leaving (n+1)(n-1) free dofs; 16383 at the reference resolution.
        # The reference benchmark quotes 16441 for this setup, which no
        # consistent node accounting reproduces; the count asserted here is
        # the one implied by the stated mesh and boundary split.
        for n in (4, 16):
            space = fem.build_space(fem.build_mesh(n))
            assert space.n_dofs == (n + 1) * (n - 1)
        assert fem.build_space(fem.build_mesh(128)).n_dofs == 16383

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            fem.build_mesh(0)


class TestMassMatrix:
    def test_total_mass_is_domain_area(self):
        mesh = fem.build_mesh(4)
        assert fem.mass_matrix(mesh).sum() == pytest.approx(1.0)

    def test_hand_integrated_two_cell_mesh(self):
        # n=1: two congruent triangles of area 1/2, local matrix A/12*[[2,1,1],...]
        mesh = fem.build_mesh(1)
        m = fem.mass_matrix(mesh).toarray()
        a = 0.5 / 12.0
        expect = np.zeros((4, 4))
        for cell in mesh.cells:
            for i, vi in enumerate(cell):
                for j, vj in enumerate(cell):
                    expect[vi, vj] += a * (2.0 if i == j else 1.0)
        assert np.abs(m - expect).max() < 1e-15

    def test_positive_definite(self):
        space = fem.build_space(fem.build_mesh(6))
        m = fem.assemble_mass(space)
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.standard_normal(space.n_dofs)
            assert x @ (m @ x) > 0.0


class TestStiffnessMatrix:
    def test_annihilates_constants(self):
        mesh = fem.build_mesh(5)
        k = fem.stiffness_matrix(mesh, 1.0)
        assert np.abs(k @ np.ones(mesh.n_nodes)).max() < 1e-13

    def test_five_point_stencil(self):
        mesh = fem.build_mesh(2)
        k = fem.stiffness_matrix(mesh, 1.0).toarray()
        center = mesh.node_id(1, 1)
        row = k[center]
        assert row[center] == pytest.approx(4.0)
        for ix, iy in ((0, 1), (2, 1), (1, 0), (1, 2)):
            assert row[mesh.node_id(ix, iy)] == pytest.approx(-1.0)
        # the split-diagonal neighbours cancel exactly
        assert row[mesh.node_id(0, 0)] == pytest.approx(0.0, abs=1e-15)
        assert row[mesh.node_id(2, 2)] == pytest.approx(0.0, abs=1e-15)

    def test_sign_changing_coefficient_assembles(self):
        mesh = fem.build_mesh(4)
        k = fem.stiffness_matrix(mesh, lambda x: np.sin(4 * np.pi * x[:, 0]))
        assert np.abs((k - k.T).toarray()).max() < 1e-14
        eigs = np.linalg.eigvalsh(k.toarray())
        assert eigs.min() < -1e-12 < 1e-12 < eigs.max()

    def test_mean_coefficient_spd_on_free_dofs(self):
        space = fem.build_space(fem.build_mesh(6))
        k = fem.assemble_stiffness(space, 1.0)
        eigs = np.linalg.eigvalsh(k.toarray())
        assert eigs.min() > 0.0


class TestBoundaryMass:
    def test_total_is_neumann_length(self):
        mesh = fem.build_mesh(4)
        assert fem.boundary_mass_matrix(mesh).sum() == pytest.approx(2.0)

    def test_interior_rows_zero(self):
        mesh = fem.build_mesh(4)
        b = fem.boundary_mass_matrix(mesh).toarray()
        interior = mesh.node_id(2, 2)
        assert np.abs(b[interior]).max() == 0.0

    def test_single_edge_element(self):
        # one bottom edge of length h contributes (h/6) [[2, 1], [1, 2]]
        mesh = fem.build_mesh(1)
        b = fem.boundary_mass_matrix(mesh).toarray()
        h = 1.0
        assert b[0, 1] == pytest.approx(h / 6.0)
        assert b[0, 0] == pytest.approx(h / 3.0)


class TestLoadsAndQuadrature:
    def test_constant_load_total(self):
        mesh = fem.build_mesh(6)
        b = fem.load_vector(mesh, lambda x: np.ones(len(x)))
        assert b.sum() == pytest.approx(1.0)

    def test_cut_lines_make_step_integrals_exact(self):
        mesh = fem.build_mesh(10)
        step = lambda x: np.where(x[:, 1] > 0.45, 2.0, 1.0)  # noqa: E731
        assert fem.integrate(mesh, step, cut_lines=(0.45,)) == pytest.approx(1.55)
        b = fem.load_vector(mesh, step, cut_lines=(0.45,))
        assert b.sum() == pytest.approx(1.55)

    def test_aligned_cut_line(self):
        mesh = fem.build_mesh(10)
        step = lambda x: np.where(x[:, 1] >= 0.4, 2.0, 1.0)  # noqa: E731
        assert fem.integrate(mesh, step, cut_lines=(0.4,)) == pytest.approx(1.6)

    def test_boundary_load(self):
        mesh = fem.build_mesh(8)
        b = fem.boundary_load_vector(mesh, lambda x: np.ones(len(x)))
        assert b.sum() == pytest.approx(2.0)


class TestProlongation:
    def test_full_operator_preserves_constants(self):
        coarse, fine = fem.build_mesh(4), fem.build_mesh(8)
        p = fem.prolongation_full(coarse, fine)
        assert np.abs(p @ np.ones(coarse.n_nodes) - 1.0).max() < 1e-14

    def test_identity_at_coarse_nodes(self):
        coarse, fine = fem.build_mesh(4), fem.build_mesh(8)
        p = fem.prolongation_full(coarse, fine).toarray()
        for iy in range(5):
            for ix in range(5):
                frow = p[fine.node_id(2 * ix, 2 * iy)]
                assert frow[coarse.node_id(ix, iy)] == 1.0
                assert frow.sum() == 1.0

    def test_galerkin_coarse_operator_identity(self):
        cs = fem.build_space(fem.build_mesh(4))
        fs = fem.build_space(fem.build_mesh(8))
        p = fem.prolongation(cs, fs)
        kf = fem.assemble_stiffness(fs, 1.0)
        kc = fem.assemble_stiffness(cs, 1.0)
        assert np.abs((p.T @ kf @ p - kc).toarray()).max() < 1e-13

    def test_rejects_non_nested(self):
        with pytest.raises(ValueError):
            fem.prolongation(fem.build_space(fem.build_mesh(4)),
                             fem.build_space(fem.build_mesh(12)))


class TestPoissonSolve:
    def test_patch_test_linear_solution(self):
        # linear Dirichlet data with zero flux on top/bottom is exact
        space = fem.build_space(fem.build_mesh(8))
        lin = lambda x: 1.0 + 2.0 * x[:, 0]  # noqa: E731
        z = fem.poisson_solve(space, 1.0, lambda x: np.zeros(len(x)),
                              dirichlet=lin)
        assert np.abs(z - lin(space.mesh.nodes)).max() < 1e-12

    def test_second_order_convergence(self):
        exact = lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])  # noqa: E731
        source = lambda x: 2 * np.pi ** 2 * exact(x)  # noqa: E731

        def flux(x):
            sign = np.where(x[:, 1] < 0.5, -1.0, 1.0)
            return sign * np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])

        errs = []
        for n in (8, 16, 32):
            space = fem.build_space(fem.build_mesh(n))
            z = fem.poisson_solve(space, 1.0, source, neumann=flux)
            e = z - exact(space.mesh.nodes)
            m = fem.mass_matrix(space.mesh)
            errs.append(math.sqrt(e @ (m @ e)))
        rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert min(rates) > 1.9


def test_write_nodal_csv(tmp_path):
    mesh = fem.build_mesh(2)
    path = tmp_path / "field.csv"
    fem.write_nodal_csv(path, mesh.nodes, np.arange(mesh.n_nodes, dtype=float))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "node_id,x1,x2,value"
    assert len(lines) == 1 + mesh.n_nodes

"""P1 finite elements on structured triangulations of the unit square.

The mesh is ``n x n`` squares, each split along the lower-left to
upper-right diagonal.  The left and right sides (``x1`` in ``{0, 1}``)
carry Dirichlet conditions and are eliminated from the free-dof space;
the top and bottom sides form the Neumann boundary.

Assembly returns matrices over all nodes; :class:`FeSpace` restricts them
to free dofs so that every block of the coupled optimality systems acts
on one consistent space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class TriMesh:
    """Conforming triangulation with tagged boundary edges."""

    n: int
    nodes: np.ndarray            # ((n+1)^2, 2)
    cells: np.ndarray            # (2 n^2, 3), positively oriented
    dirichlet_edges: np.ndarray  # (2n, 2) node pairs on x1 in {0, 1}
    neumann_edges: np.ndarray    # (2n, 2) node pairs on x2 in {0, 1}

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def node_id(self, ix: int, iy: int) -> int:
        return iy * (self.n + 1) + ix

    def centroids(self) -> np.ndarray:
        return self.nodes[self.cells].mean(axis=1)

    def dirichlet_nodes(self) -> np.ndarray:
        """All nodes on the two vertical sides (corners included)."""
        m = self.n + 1
        ids = np.arange(self.n_nodes)
        ix = ids % m
        return ids[(ix == 0) | (ix == self.n)]


def build_mesh(n: int) -> TriMesh:
    """Structured mesh of ``n x n`` squares, two triangles each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    m = n + 1
    xs = np.linspace(0.0, 1.0, m)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (iy * m + ix).ravel()
    v10 = v00 + 1
    v01 = v00 + m
    v11 = v01 + 1
    cells = np.concatenate([
        np.stack([v00, v10, v11], axis=1),
        np.stack([v00, v11, v01], axis=1),
    ])

    iy_edge = np.arange(n)
    dir_edges = []
    for col in (0, n):
        a = iy_edge * m + col
        dir_edges.append(np.stack([a, a + m], axis=1))
    ix_edge = np.arange(n)
    neu_edges = []
    for row in (0, n):
        a = row * m + ix_edge
        neu_edges.append(np.stack([a, a + 1], axis=1))
    return TriMesh(n, nodes, cells,
                   np.concatenate(dir_edges), np.concatenate(neu_edges))


@dataclass(frozen=True)
class FeSpace:
    """Free (non-Dirichlet) P1 dof bookkeeping over a mesh."""

    mesh: TriMesh
    free_nodes: np.ndarray
    dof_of_node: np.ndarray  # -1 for constrained nodes

    @property
    def n_dofs(self) -> int:
        return self.free_nodes.size

    def restrict_matrix(self, mat: sp.spmatrix) -> sp.csr_matrix:
        out = mat.tocsr()[self.free_nodes][:, self.free_nodes]
        out.eliminate_zeros()
        return out

    def restrict_vector(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec)[..., self.free_nodes]

    def extend_vector(self, vec: np.ndarray) -> np.ndarray:
        """Embed free-dof values into an all-node vector (zeros elsewhere)."""
        vec = np.asarray(vec)
        out = np.zeros(vec.shape[:-1] + (self.mesh.n_nodes,))
        out[..., self.free_nodes] = vec
        return out

    def coords(self) -> np.ndarray:
        return self.mesh.nodes[self.free_nodes]


def build_space(mesh: TriMesh) -> FeSpace:
    constrained = np.zeros(mesh.n_nodes, dtype=bool)
    constrained[mesh.dirichlet_nodes()] = True
    free = np.flatnonzero(~constrained)
    dof = np.full(mesh.n_nodes, -1, dtype=np.int64)
    dof[free] = np.arange(free.size)
    return FeSpace(mesh, free, dof)


# -- assembly over all nodes -------------------------------------------------

_MASS_LOCAL = np.array([[2.0, 1.0, 1.0],
                        [1.0, 2.0, 1.0],
                        [1.0, 1.0, 2.0]]) / 12.0


def _cell_geometry(mesh: TriMesh):
    """Areas and P1 gradient factors for every cell."""
    p = mesh.nodes[mesh.cells]          # (nc, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # grad phi_i = (b_i, c_i) / (2 A)
    b = np.stack([p[:, 1, 1] - p[:, 2, 1],
                  p[:, 2, 1] - p[:, 0, 1],
                  p[:, 0, 1] - p[:, 1, 1]], axis=1)
    c = np.stack([p[:, 2, 0] - p[:, 1, 0],
                  p[:, 0, 0] - p[:, 2, 0],
                  p[:, 1, 0] - p[:, 0, 0]], axis=1)
    return area, b, c


def _scatter(mesh: TriMesh, local: np.ndarray) -> sp.csr_matrix:
    """Sum (nc, 3, 3) local matrices into a global sparse matrix."""
    cells = mesh.cells
    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)),
                        shape=(mesh.n_nodes, mesh.n_nodes))
    out = mat.tocsr()
    out.eliminate_zeros()
    return out


def mass_matrix(mesh: TriMesh) -> sp.csr_matrix:
    area, _, _ = _cell_geometry(mesh)
    local = area[:, None, None] * _MASS_LOCAL[None]
    return _scatter(mesh, local)


def stiffness_matrix(mesh: TriMesh, coeff) -> sp.csr_matrix:
    """Weighted stiffness; ``coeff`` is a callable on points or a constant.

    The coefficient is sampled at cell centroids (piecewise constant),
    which is exact enough for P1 and keeps assembly deterministic.
    """
    area, b, c = _cell_geometry(mesh)
    if callable(coeff):
        kappa = np.asarray(coeff(mesh.centroids()), dtype=float)
    else:
        kappa = np.full(mesh.cells.shape[0], float(coeff))
    scale = kappa / (4.0 * area)
    local = scale[:, None, None] * (b[:, :, None] * b[:, None, :]
                                    + c[:, :, None] * c[:, None, :])
    return _scatter(mesh, local)


def boundary_mass_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """Mass matrix of the Neumann-boundary trace; zero elsewhere."""
    edges = mesh.neumann_edges
    p = mesh.nodes[edges]
    lengths = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    local = lengths[:, None, None] * (np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)[None]
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)),
                        shape=(mesh.n_nodes, mesh.n_nodes))
    out = mat.tocsr()
    out.eliminate_zeros()
    return out


# -- load vectors ------------------------------------------------------------

# degree-2 exact rule with strictly interior points (barycentric rows)
_INTERIOR3 = np.array([[4.0, 1.0, 1.0],
                       [1.0, 4.0, 1.0],
                       [1.0, 1.0, 4.0]]) / 6.0


def _split_by_line(tri: np.ndarray, c: float, eps: float = 1e-13):
    """Split a triangle by the horizontal line x2 = c into sub-triangles."""
    d = tri[:, 1] - c
    pos = d > eps
    neg = d < -eps
    if not pos.any() or not neg.any():
        return [tri]

    def cut(a, b):
        t = (c - tri[a, 1]) / (tri[b, 1] - tri[a, 1])
        return tri[a] + t * (tri[b] - tri[a])

    zero = np.flatnonzero(~pos & ~neg)
    if zero.size == 1:
        z = zero[0]
        i, j = [k for k in range(3) if k != z]
        p = cut(i, j)
        return [np.array([tri[z], tri[i], p]), np.array([tri[z], p, tri[j]])]
    # one vertex alone on its side of the line
    lone = np.flatnonzero(pos) if pos.sum() == 1 else np.flatnonzero(neg)
    a = lone[0]
    b, e = [(a + 1) % 3, (a + 2) % 3]
    p1 = cut(a, b)
    p2 = cut(a, e)
    return [np.array([tri[a], p1, p2]),
            np.array([p1, tri[b], tri[e]]),
            np.array([p1, tri[e], p2])]


def _subdivide(tri: np.ndarray, cut_lines) -> list[np.ndarray]:
    tris = [tri]
    for c in cut_lines:
        nxt = []
        for t in tris:
            nxt.extend(_split_by_line(t, c))
        tris = nxt
    return tris


def _tri_area(tri: np.ndarray) -> float:
    d1 = tri[1] - tri[0]
    d2 = tri[2] - tri[0]
    return 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])


def _barycentric(parent: np.ndarray, pts: np.ndarray) -> np.ndarray:
    d1 = parent[1] - parent[0]
    d2 = parent[2] - parent[0]
    det = d1[0] * d2[1] - d1[1] * d2[0]
    r = pts - parent[0]
    l1 = (r[:, 0] * d2[1] - r[:, 1] * d2[0]) / det
    l2 = (d1[0] * r[:, 1] - d1[1] * r[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def load_vector(mesh: TriMesh, f, cut_lines=()) -> np.ndarray:
    """Assemble the source functional with the 3-point edge-midpoint rule.

    ``cut_lines`` lists horizontal discontinuity lines of ``f``; straddling
    cells are subdivided so the rule sees only smooth pieces.
    """
    p = mesh.nodes[mesh.cells]
    area, _, _ = _cell_geometry(mesh)
    mids = 0.5 * (p + np.roll(p, -1, axis=1))          # (nc, 3, 2) edge midpoints
    # phi values at edge midpoints: 1/2 on the two adjacent vertices
    phi = 0.5 * (np.eye(3) + np.roll(np.eye(3), -1, axis=0))
    fv = np.asarray(f(mids.reshape(-1, 2)), dtype=float).reshape(-1, 3)
    local = (area[:, None] / 3.0) * np.einsum("cq,qi->ci", fv, phi)

    cut_lines = sorted(cut_lines)
    if cut_lines:
        ymin = p[:, :, 1].min(axis=1)
        ymax = p[:, :, 1].max(axis=1)
        straddle = np.zeros(len(p), dtype=bool)
        for c in cut_lines:
            # include cells merely touching the line: their edge-midpoint
            # samples would land exactly on the discontinuity
            straddle |= (ymin < c + 1e-12) & (ymax > c - 1e-12)
        for ci in np.flatnonzero(straddle):
            parent = p[ci]
            acc = np.zeros(3)
            for t in _subdivide(parent, cut_lines):
                a = _tri_area(t)
                if a < 1e-16:
                    continue
                qp = _INTERIOR3 @ t   # strictly interior, so never on a cut
                lam = _barycentric(parent, qp)
                acc += (a / 3.0) * np.asarray(f(qp), dtype=float) @ lam
            local[ci] = acc

    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.cells.ravel(), local.ravel())
    return out


def integrate(mesh: TriMesh, f, cut_lines=()) -> float:
    """Cellwise 3-point quadrature of a scalar integrand over the domain."""
    p = mesh.nodes[mesh.cells]
    area, _, _ = _cell_geometry(mesh)
    mids = 0.5 * (p + np.roll(p, -1, axis=1))
    fv = np.asarray(f(mids.reshape(-1, 2)), dtype=float).reshape(-1, 3)
    vals = (area / 3.0) * fv.sum(axis=1)

    cut_lines = sorted(cut_lines)
    if cut_lines:
        ymin = p[:, :, 1].min(axis=1)
        ymax = p[:, :, 1].max(axis=1)
        straddle = np.zeros(len(p), dtype=bool)
        for c in cut_lines:
            # include cells merely touching the line: their edge-midpoint
            # samples would land exactly on the discontinuity
            straddle |= (ymin < c + 1e-12) & (ymax > c - 1e-12)
        for ci in np.flatnonzero(straddle):
            acc = 0.0
            for t in _subdivide(p[ci], cut_lines):
                a = _tri_area(t)
                if a < 1e-16:
                    continue
                acc += (a / 3.0) * float(np.sum(f(_INTERIOR3 @ t)))
            vals[ci] = acc
    return float(vals.sum())


def boundary_load_vector(mesh: TriMesh, g) -> np.ndarray:
    """Neumann-boundary functional assembled with 2-point Gauss per edge."""
    edges = mesh.neumann_edges
    p = mesh.nodes[edges]
    lengths = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    t = 0.5 * (1.0 - 1.0 / np.sqrt(3.0)), 0.5 * (1.0 + 1.0 / np.sqrt(3.0))
    out = np.zeros(mesh.n_nodes)
    for tq in t:
        pts = (1.0 - tq) * p[:, 0] + tq * p[:, 1]
        gv = np.asarray(g(pts), dtype=float)
        np.add.at(out, edges[:, 0], 0.5 * lengths * gv * (1.0 - tq))
        np.add.at(out, edges[:, 1], 0.5 * lengths * gv * tq)
    return out


def interpolate_nodal(mesh: TriMesh, f) -> np.ndarray:
    return np.asarray(f(mesh.nodes), dtype=float)


# -- restricted (free-dof) conveniences --------------------------------------

def assemble_mass(space: FeSpace) -> sp.csr_matrix:
    return space.restrict_matrix(mass_matrix(space.mesh))


def assemble_stiffness(space: FeSpace, coeff) -> sp.csr_matrix:
    return space.restrict_matrix(stiffness_matrix(space.mesh, coeff))


def assemble_boundary_mass(space: FeSpace) -> sp.csr_matrix:
    return space.restrict_matrix(boundary_mass_matrix(space.mesh))


def prolongation_full(coarse_mesh: TriMesh, fine_mesh: TriMesh) -> sp.csr_matrix:
    """All-node linear interpolation operator from coarse to fine mesh."""
    nc = coarse_mesh.n
    nf = fine_mesh.n
    if nf != 2 * nc:
        raise ValueError("fine mesh is not one refinement of the coarse mesh")
    mc = nc + 1
    rows, cols, vals = [], [], []

    def add(fnode, cix, ciy, w):
        rows.append(fnode)
        cols.append(ciy * mc + cix)
        vals.append(w)

    for node in range(fine_mesh.n_nodes):
        ix = node % (nf + 1)
        iy = node // (nf + 1)
        ex, ey = ix % 2 == 0, iy % 2 == 0
        if ex and ey:
            add(node, ix // 2, iy // 2, 1.0)
        elif not ex and ey:
            add(node, (ix - 1) // 2, iy // 2, 0.5)
            add(node, (ix + 1) // 2, iy // 2, 0.5)
        elif ex and not ey:
            add(node, ix // 2, (iy - 1) // 2, 0.5)
            add(node, ix // 2, (iy + 1) // 2, 0.5)
        else:
            # centre of a coarse square: midpoint of its split diagonal
            add(node, (ix - 1) // 2, (iy - 1) // 2, 0.5)
            add(node, (ix + 1) // 2, (iy + 1) // 2, 0.5)

    return sp.csr_matrix((vals, (rows, cols)),
                         shape=(fine_mesh.n_nodes, coarse_mesh.n_nodes))


def prolongation(coarse: FeSpace, fine: FeSpace) -> sp.csr_matrix:
    """Linear interpolation from coarse to fine free dofs.

    Dirichlet columns and rows of the all-node interpolation are dropped,
    which is exact for homogeneous Dirichlet data; the transpose acts as
    the (Galerkin-scaled) restriction.
    """
    full = prolongation_full(coarse.mesh, fine.mesh)
    out = full[fine.free_nodes][:, coarse.free_nodes].tocsr()
    out.eliminate_zeros()
    return out


def poisson_solve(space: FeSpace, coeff, source, neumann=None, dirichlet=None):
    """Direct solve of the scalar diffusion problem; test utility.

    Returns all-node values with the Dirichlet data filled in.
    """
    from scipy.sparse.linalg import spsolve

    mesh = space.mesh
    K = stiffness_matrix(mesh, coeff)
    b = load_vector(mesh, source)
    if neumann is not None:
        b = b + boundary_load_vector(mesh, neumann)
    z_full = np.zeros(mesh.n_nodes)
    if dirichlet is not None:
        dnodes = mesh.dirichlet_nodes()
        z_full[dnodes] = np.asarray(dirichlet(mesh.nodes[dnodes]), dtype=float)
        b = b - K @ z_full
    Kff = space.restrict_matrix(K)
    z_full[space.free_nodes] = spsolve(Kff.tocsc(), space.restrict_vector(b))
    return z_full


def write_nodal_csv(path, coords: np.ndarray, values: np.ndarray,
                    node_ids=None) -> None:
    """Write one nodal field as CSV rows (node_id, x1, x2, value)."""
    coords = np.atleast_2d(coords)
    values = np.asarray(values)
    if node_ids is None:
        node_ids = np.arange(coords.shape[0])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "x1", "x2", "value"])
        for nid, (x1, x2), v in zip(node_ids, coords, values):
            writer.writerow([int(nid), f"{x1:.16g}", f"{x2:.16g}", f"{v:.16g}"])

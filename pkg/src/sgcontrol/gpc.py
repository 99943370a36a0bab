"""Generalized polynomial chaos bases and sparse-grid cubature.

Two 1D orthonormal families are supported:

* ``"legendre"``: Legendre polynomials rescaled to the uniform density on
  ``[-sqrt(3), sqrt(3)]``, so the underlying random variable has zero mean
  and unit variance.
* ``"hermite"``: probabilists' Hermite polynomials normalised against the
  standard normal density.

Multivariate bases are total-degree tensor products over a per-dimension
family list, enumerated in graded lexicographic order with the constant
polynomial first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQRT3 = math.sqrt(3.0)

FAMILIES = ("legendre", "hermite")

#: Hard cap on basis size; exceeding it raises instead of exhausting memory.
DEFAULT_MAX_BASIS = 100_000


class CapacityError(ValueError):
    """Requested basis would exceed the configured maximum size."""


def _check_family(family: str) -> str:
    if family not in FAMILIES:
        raise ValueError(f"unknown polynomial family {family!r}")
    return family


def recurrence_coeff(family: str, k: int) -> float:
    """Off-diagonal coefficient c_k of the three-term recurrence.

    For either family ``y * phi_{k-1} = c_k * phi_k + c_{k-1} * phi_{k-2}``
    (symmetric densities have no diagonal term), so ``c_k`` is also the
    weighted integral of ``y * phi_{k-1} * phi_k``.
    """
    if k <= 0:
        return 0.0
    if family == "hermite":
        return math.sqrt(k)
    return SQRT3 * k / math.sqrt((2 * k - 1) * (2 * k + 1))


def family_values(family: str, max_degree: int, y: np.ndarray) -> np.ndarray:
    """Evaluate phi_0 .. phi_max_degree at points ``y``; shape (npts, max_degree+1)."""
    _check_family(family)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    vals = np.empty((y.size, max_degree + 1))
    vals[:, 0] = 1.0
    if max_degree >= 1:
        vals[:, 1] = y / recurrence_coeff(family, 1)
    for a in range(1, max_degree):
        ca = recurrence_coeff(family, a)
        cb = recurrence_coeff(family, a + 1)
        vals[:, a + 1] = (y * vals[:, a] - ca * vals[:, a - 1]) / cb
    return vals


def family_derivatives(family: str, max_degree: int, y: np.ndarray) -> np.ndarray:
    """First derivatives of the orthonormal 1D polynomials at ``y``."""
    _check_family(family)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    vals = family_values(family, max_degree, y)
    ders = np.zeros_like(vals)
    if max_degree >= 1:
        ders[:, 1] = 1.0 / recurrence_coeff(family, 1)
    for a in range(1, max_degree):
        ca = recurrence_coeff(family, a)
        cb = recurrence_coeff(family, a + 1)
        ders[:, a + 1] = (vals[:, a] + y * ders[:, a] - ca * ders[:, a - 1]) / cb
    return ders


def gauss_rule(family: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss rule (nodes, weights) integrating against the family density."""
    _check_family(family)
    if n < 1:
        raise ValueError("rule size must be positive")
    if family == "hermite":
        x, w = np.polynomial.hermite_e.hermegauss(n)
        return x, w / math.sqrt(2.0 * math.pi)
    x, w = np.polynomial.legendre.leggauss(n)
    return SQRT3 * x, w / 2.0


def deriv_inner_1d(family: str, a: int, b: int) -> float:
    """Closed form of the density-weighted integral of phi_a' * phi_b'."""
    _check_family(family)
    if family == "hermite":
        return float(a) if a == b else 0.0
    if (a + b) % 2 == 1:
        return 0.0
    m = min(a, b)
    return math.sqrt((2 * a + 1) * (2 * b + 1)) / 3.0 * (m * (m + 1)) / 2.0


def _compositions(total: int, parts: int):
    """Weak compositions of ``total`` into ``parts`` slots, lexicographically."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


@dataclass(frozen=True)
class GpcBasis:
    """Total-degree multivariate orthonormal polynomial basis.

    ``index_set`` holds one multi-index per row in graded lexicographic
    order; row ``j`` realises the positional bijection between flat basis
    indices and multi-indices.  Immutable and shareable.
    """

    families: tuple[str, ...]
    total_degree: int
    index_set: np.ndarray  # (Q, L) int array
    _lookup: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def dim_count(self) -> int:
        return self.index_set.shape[1]

    @property
    def size(self) -> int:
        return self.index_set.shape[0]

    def position(self, multi_index) -> int:
        """Flat index of a multi-index; inverse of row lookup."""
        return self._lookup[tuple(int(v) for v in multi_index)]

    def eval_matrix(self, points: np.ndarray) -> np.ndarray:
        """Evaluate every basis polynomial at each point; shape (npts, Q)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim_count:
            raise ValueError("point dimension does not match basis")
        p = self.total_degree
        per_dim = [family_values(fam, p, points[:, d])
                   for d, fam in enumerate(self.families)]
        out = np.ones((points.shape[0], self.size))
        for d in range(self.dim_count):
            out *= per_dim[d][:, self.index_set[:, d]]
        return out


def build_basis(dim_count: int, total_degree: int, family="legendre",
                max_size: int = DEFAULT_MAX_BASIS) -> GpcBasis:
    """Assemble the total-degree basis for ``dim_count`` variables.

    ``family`` is a single name or a per-dimension sequence (mixed bases
    arise when appending Gaussian-driven control-noise dimensions to a
    uniform-driven diffusion parametrisation).
    """
    if dim_count < 1:
        raise ValueError("dim_count must be >= 1")
    if total_degree < 0:
        raise ValueError("total_degree must be >= 0")
    if isinstance(family, str):
        families = (_check_family(family),) * dim_count
    else:
        families = tuple(_check_family(f) for f in family)
        if len(families) != dim_count:
            raise ValueError("need one family per dimension")
    size = math.comb(dim_count + total_degree, dim_count)
    if size > max_size:
        raise CapacityError(
            f"basis size {size} exceeds maximum {max_size}")
    rows = []
    for degree in range(total_degree + 1):
        rows.extend(_compositions(degree, dim_count))
    index_set = np.array(rows, dtype=np.int64)
    lookup = {tuple(int(v) for v in row): j for j, row in enumerate(rows)}
    return GpcBasis(families, total_degree, index_set, lookup)


def eval_poly(basis: GpcBasis, j: int, y) -> float:
    """Value of basis polynomial ``j`` at a single parameter point."""
    if not 0 <= j < basis.size:
        raise IndexError(f"basis index {j} out of range")
    y = np.asarray(y, dtype=float).reshape(1, -1)
    return float(basis.eval_matrix(y)[0, j])


def coupling_matrix(basis: GpcBasis, slot: int | None) -> np.ndarray:
    """Gram matrix of the basis weighted by a stochastic factor.

    ``slot=None`` weights by the constant one (yielding the identity);
    an integer weights by the coordinate ``y_slot``.  General polynomial
    weights are not supported.
    """
    q = basis.size
    if slot is None:
        return np.eye(q)
    if not isinstance(slot, (int, np.integer)):
        raise ValueError("weight must be the constant 1 (None) or a coordinate slot")
    if not 0 <= slot < basis.dim_count:
        raise ValueError(f"coordinate slot {slot} out of range")
    fam = basis.families[slot]
    mat = np.zeros((q, q))
    for j in range(q):
        mi = basis.index_set[j].copy()
        mi[slot] += 1
        k = basis._lookup.get(tuple(int(v) for v in mi))
        if k is not None:
            c = recurrence_coeff(fam, int(mi[slot]))
            mat[j, k] = c
            mat[k, j] = c
    return mat


def gradient_matrix(basis: GpcBasis) -> np.ndarray:
    """Gram matrix of parameter-space gradients of the basis polynomials.

    Built from the per-dimension closed forms in :func:`deriv_inner_1d`;
    symmetric positive semidefinite, with zero row and column for the
    constant polynomial.
    """
    q = basis.size
    idx = basis.index_set
    mat = np.zeros((q, q))
    for d in range(basis.dim_count):
        fam = basis.families[d]
        groups: dict[tuple, list[int]] = {}
        reduced = np.delete(idx, d, axis=1)
        for j in range(q):
            groups.setdefault(tuple(int(v) for v in reduced[j]), []).append(j)
        for members in groups.values():
            for ja in members:
                a = int(idx[ja, d])
                for jb in members:
                    b = int(idx[jb, d])
                    mat[ja, jb] += deriv_inner_1d(fam, a, b)
    return mat


@dataclass(frozen=True)
class _GridTerm:
    """One tensor-product component of the sparse-grid combination."""

    coeff: float
    nodes_1d: tuple[np.ndarray, ...]
    global_idx: np.ndarray  # flat tensor position -> merged point id


@dataclass(frozen=True)
class SparseGrid:
    """Sparse cubature/interpolation grid over the parameter box.

    ``points`` are merged across combination terms (coordinates equal to
    12 decimals collapse to one point) and ``weights`` carry the signed
    combination coefficients folded in; negative weights are expected.
    """

    points: np.ndarray  # (P, L)
    weights: np.ndarray  # (P,)
    level: int
    terms: tuple[_GridTerm, ...] = field(repr=False, compare=False, default=())

    @property
    def dim_count(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


def _rule_size(level_1d: int) -> int:
    # Odd sizes 1, 3, 7, 15, ... keep every rule symmetric with a node at 0,
    # which is what reproduces the reference point counts.
    return 2 ** (level_1d + 1) - 1


def build_sparse_grid(dim_count: int, level: int) -> SparseGrid:
    """Smolyak combination-technique grid from 1D Gauss-Legendre rules.

    The 1D rule at level ``l`` has ``2**(l+1) - 1`` points mapped to
    ``[-sqrt(3), sqrt(3)]`` with the uniform density; combination weights
    are folded into the per-point cubature weights.
    """
    if dim_count < 1:
        raise ValueError("dim_count must be >= 1")
    if level < 0:
        raise ValueError("level must be >= 0")
    rules = [gauss_rule("legendre", _rule_size(l)) for l in range(level + 1)]

    point_ids: dict[tuple, int] = {}
    points: list[tuple] = []
    weight_acc: list[float] = []
    terms: list[_GridTerm] = []

    lo = max(0, level - (dim_count - 1))
    for total in range(lo, level + 1):
        coeff = (-1.0) ** (level - total) * math.comb(dim_count - 1, level - total)
        for levels in _compositions(total, dim_count):
            nodes_1d = tuple(rules[l][0] for l in levels)
            weights_1d = [rules[l][1] for l in levels]
            tensor_w = weights_1d[0]
            for w in weights_1d[1:]:
                tensor_w = np.multiply.outer(tensor_w, w)
            tensor_w = tensor_w.ravel()
            grids = np.meshgrid(*nodes_1d, indexing="ij")
            coords = np.stack([g.ravel() for g in grids], axis=1)
            idx = np.empty(coords.shape[0], dtype=np.int64)
            for row in range(coords.shape[0]):
                key = tuple(round(float(v), 12) for v in coords[row])
                pid = point_ids.get(key)
                if pid is None:
                    pid = len(points)
                    point_ids[key] = pid
                    points.append(tuple(float(v) for v in coords[row]))
                    weight_acc.append(0.0)
                weight_acc[pid] += coeff * float(tensor_w[row])
                idx[row] = pid
            terms.append(_GridTerm(coeff, nodes_1d, idx))

    return SparseGrid(np.array(points), np.array(weight_acc), level, tuple(terms))


def cubature(grid: SparseGrid, samples) -> float:
    """Weighted sum of per-point samples approximating the density integral."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] != len(grid):
        raise ValueError(
            f"sample count {samples.shape[0]} does not match grid size {len(grid)}")
    return samples.T @ grid.weights


def _lagrange_values(nodes: np.ndarray, x: float) -> np.ndarray:
    """Values of the Lagrange cardinal polynomials on ``nodes`` at ``x``."""
    n = nodes.size
    if n == 1:
        return np.ones(1)
    vals = np.empty(n)
    for k in range(n):
        num = 1.0
        den = 1.0
        for j in range(n):
            if j != k:
                num *= x - nodes[j]
                den *= nodes[k] - nodes[j]
        vals[k] = num / den
    return vals


def interp_weights(grid: SparseGrid, y) -> np.ndarray:
    """Per-point weights of the combination-technique interpolant at ``y``.

    A field sampled at the grid points is evaluated at ``y`` as the dot
    product of its samples with these weights.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != grid.dim_count:
        raise ValueError("point dimension does not match grid")
    if np.any(np.abs(y) > SQRT3 + 1e-12):
        raise ValueError("evaluation point outside the parameter box")
    out = np.zeros(len(grid))
    for term in grid.terms:
        tensor = _lagrange_values(term.nodes_1d[0], y[0])
        for d in range(1, grid.dim_count):
            tensor = np.multiply.outer(tensor, _lagrange_values(term.nodes_1d[d], y[d]))
        np.add.at(out, term.global_idx, term.coeff * tensor.ravel())
    return out

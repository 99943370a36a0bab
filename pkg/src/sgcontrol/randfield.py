"""Karhunen-Loeve expansions of random fields on a rectangle.

The covariance kernel is the separable exponential
``sigma^2 * exp(-|x1-x1'|/c) * exp(-|x2-x2'|/c)``, whose eigenpairs are
tensor products of the classic 1D exponential-kernel eigenpairs.  The 1D
eigenpairs are analytic up to the roots of a transcendental equation,
which are found by bisection on bracketed intervals, so no numerical
eigensolver is needed in the production path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq


@dataclass(frozen=True)
class CovarianceSpec:
    """Separable exponential covariance on an axis-aligned box."""

    variance: float
    corr_length: float
    domain: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 1.0), (0.0, 1.0))
    kind: str = "separable-exponential"

    def __post_init__(self):
        if self.variance <= 0.0:
            raise ValueError("variance must be positive")
        if self.corr_length <= 0.0:
            raise ValueError("correlation length must be positive")
        if self.kind != "separable-exponential":
            raise ValueError(f"unsupported covariance kind {self.kind!r}")


class RootBracketError(RuntimeError):
    """A transcendental eigenvalue equation could not be bracketed."""


@dataclass(frozen=True)
class Eigen1D:
    """One eigenpair of the 1D exponential kernel on an interval."""

    eigenvalue: float
    frequency: float
    kind: str        # "even" (cosine) or "odd" (sine) about the midpoint
    norm: float      # L2-normalisation constant
    center: float
    halfwidth: float

    def values(self, x: np.ndarray) -> np.ndarray:
        t = np.asarray(x, dtype=float) - self.center
        if self.kind == "even":
            return np.cos(self.frequency * t) / self.norm
        return np.sin(self.frequency * t) / self.norm


def _eigen_1d(corr_length: float, lo: float, hi: float, count: int) -> list[Eigen1D]:
    """Leading 1D eigenpairs of exp(-|s-t|/c) on [lo, hi], eigenvalue-sorted."""
    c = 1.0 / corr_length
    b = 0.5 * (hi - lo)
    center = 0.5 * (lo + hi)
    pairs: list[Eigen1D] = []
    nudge = 1e-11

    def even_fn(w):
        return c - w * math.tan(w * b)

    def odd_fn(w):
        return w + c * math.tan(w * b)

    n_each = count + 1
    for k in range(n_each):
        # kth even root lies between consecutive tangent poles
        wlo = (2 * k - 1) * math.pi / (2 * b) if k > 0 else 0.0
        whi = (2 * k + 1) * math.pi / (2 * b)
        wlo += nudge
        whi -= nudge
        if even_fn(wlo) * even_fn(whi) > 0:
            raise RootBracketError(f"even mode {k}: no sign change in bracket")
        w = brentq(even_fn, wlo, whi, xtol=1e-14, rtol=8.9e-16)
        lam = 2.0 * c / (w ** 2 + c ** 2)
        norm = math.sqrt(b + math.sin(2 * w * b) / (2 * w))
        pairs.append(Eigen1D(lam, w, "even", norm, center, b))
    for k in range(1, n_each + 1):
        wlo = (2 * k - 1) * math.pi / (2 * b) + nudge
        whi = (2 * k + 1) * math.pi / (2 * b) - nudge
        if odd_fn(wlo) * odd_fn(whi) > 0:
            raise RootBracketError(f"odd mode {k}: no sign change in bracket")
        w = brentq(odd_fn, wlo, whi, xtol=1e-14, rtol=8.9e-16)
        lam = 2.0 * c / (w ** 2 + c ** 2)
        norm = math.sqrt(b - math.sin(2 * w * b) / (2 * w))
        pairs.append(Eigen1D(lam, w, "odd", norm, center, b))
    pairs.sort(key=lambda e: -e.eigenvalue)
    return pairs[:count]


@dataclass(frozen=True)
class Mode2D:
    """One scaled KL mode: amplitude * e_i(x1) * e_j(x2)."""

    amplitude: float  # sqrt of the scaled 2D eigenvalue
    part_x: Eigen1D
    part_y: Eigen1D

    @property
    def eigenvalue(self) -> float:
        return self.amplitude ** 2

    def values(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.amplitude * self.part_x.values(x[:, 0]) * self.part_y.values(x[:, 1])


@dataclass(frozen=True)
class KlField:
    """Truncated KL representation ``mean + sum_k mode_k(x) * y[slot_k]``.

    ``stochastic_slots[k]`` names the parameter coordinate driving mode
    ``k``; slots need not start at zero so that several fields can share
    one parameter vector.  Immutable, safe to share across threads.
    """

    mean_value: float
    modes: tuple[Mode2D, ...]
    stochastic_slots: tuple[int, ...]
    variance: float
    corr_length: float
    spec: CovarianceSpec = field(repr=False, default=None)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mean_fn(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.full(x.shape[0], self.mean_value)

    def mode_values(self, x: np.ndarray) -> np.ndarray:
        """Stacked mode evaluations, shape (n_modes, npts)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.modes:
            return np.zeros((0, x.shape[0]))
        return np.stack([m.values(x) for m in self.modes])

    def realization(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Field values at spatial points ``x`` for one parameter point ``y``."""
        y = np.asarray(y, dtype=float).ravel()
        for slot in self.stochastic_slots:
            if slot >= y.size:
                raise ValueError(f"parameter point lacks slot {slot}")
        out = self.mean_fn(x)
        if self.modes:
            coeff = np.array([y[s] for s in self.stochastic_slots])
            out = out + coeff @ self.mode_values(x)
        return out


def kl_expand(spec: CovarianceSpec, n_modes: int, offset_mean: float,
              slot_offset: int = 0) -> KlField:
    """Truncate the KL expansion of the covariance after ``n_modes`` terms.

    Modes are the tensor products of 1D eigenpairs with the ``n_modes``
    largest 2D eigenvalues (scaled by the variance), in non-increasing
    eigenvalue order with deterministic tie-breaking.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    e1 = _eigen_1d(spec.corr_length, *spec.domain[0], count=n_modes)
    e2 = _eigen_1d(spec.corr_length, *spec.domain[1], count=n_modes)
    candidates = []
    for i, ex in enumerate(e1):
        for j, ey in enumerate(e2):
            lam = spec.variance * ex.eigenvalue * ey.eigenvalue
            candidates.append((-lam, i, j, ex, ey))
    candidates.sort(key=lambda t: t[:3])
    modes = tuple(Mode2D(math.sqrt(-neg), ex, ey)
                  for neg, _i, _j, ex, ey in candidates[:n_modes])
    slots = tuple(range(slot_offset, slot_offset + n_modes))
    return KlField(offset_mean, modes, slots, spec.variance, spec.corr_length, spec)


def sample_field(fld: KlField, y):
    """Freeze the parameter point: returns a spatial function of ``x``."""
    y = np.asarray(y, dtype=float).ravel()
    for slot in fld.stochastic_slots:
        if slot >= y.size:
            raise ValueError(f"parameter point lacks slot {slot}")
    return lambda x: fld.realization(x, y)


def min_realization(fld: KlField, x: np.ndarray, points: np.ndarray) -> float:
    """Smallest field value over all (spatial sample, parameter point) pairs.

    Used to verify positivity of a diffusion coefficient at collocation
    points before solving.
    """
    vals = fld.mode_values(x)
    mins = np.full(np.atleast_2d(x).shape[0], fld.mean_value)
    points = np.atleast_2d(points)
    best = np.inf
    for y in points:
        r = mins + np.array([y[s] for s in fld.stochastic_slots]) @ vals
        best = min(best, float(r.min()))
    return best


def write_modes_csv(fld: KlField, coords: np.ndarray, path) -> None:
    """Dump per-mode nodal values as CSV rows (node_id, x1, x2, value)."""
    coords = np.atleast_2d(coords)
    vals = fld.mode_values(coords)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "node_id", "x1", "x2", "value"])
        for k in range(fld.n_modes):
            for i, (x1, x2) in enumerate(coords):
                writer.writerow([k, i, f"{x1:.16g}", f"{x2:.16g}", f"{vals[k, i]:.16g}"])

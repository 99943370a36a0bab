"""Solvers for elliptic optimal control problems with stochastic coefficients.

Subpackages cover polynomial chaos bases and sparse grids (:mod:`gpc`),
Karhunen-Loeve random fields (:mod:`randfield`), P1 finite elements
(:mod:`fem`), one-shot Galerkin systems (:mod:`oneshot`), stochastic
collocation (:mod:`colloc`), iterative solvers (:mod:`solve`), and the
scenario runner behind the command line interface (:mod:`scenarios`,
:mod:`cli`).
"""

from . import colloc, fem, gpc, oneshot, randfield, scenarios, solve

__all__ = ["colloc", "fem", "gpc", "oneshot", "randfield", "scenarios", "solve"]
__version__ = "0.1.0"

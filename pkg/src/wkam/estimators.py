"""Estimator-style wrappers around the functional API.

``fit`` takes a :class:`ProblemSpec`; results land in trailing-underscore
attributes.  Constructor arguments are the discretisation and solver knobs,
so ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import CouplingMatrix, HamiltonianSpec
from .evolve import normalize_spec, solve_adjoint, solve_cauchy_regularized, solve_ergodic
from .grid import PeriodicGrid, lipschitz_constant, mollify
from .mather import (
    VelocityGrid,
    action,
    assemble_lp,
    holonomy_residual,
    measure_from_adjoint,
    sample_optimal_face,
    solve_mather_lp,
    uniqueness_set,
)
from ._validation import check_grid_function, check_is_fitted


@dataclass(frozen=True)
class ProblemSpec:
    """A Hamiltonian together with its coupling matrix."""

    hamiltonian: HamiltonianSpec
    coupling: CouplingMatrix

    def __post_init__(self):
        if self.hamiltonian.m != self.coupling.m:
            raise ValueError(f"Hamiltonian has {self.hamiltonian.m} components, coupling {self.coupling.m}")

    @property
    def d(self) -> int:
        return self.hamiltonian.d

    @property
    def m(self) -> int:
        return self.hamiltonian.m

    def grid(self, N: int) -> PeriodicGrid:
        return PeriodicGrid(self.d, N, self.m)


def _check_problem(problem) -> ProblemSpec:
    if not isinstance(problem, ProblemSpec):
        raise TypeError(f"fit expects a ProblemSpec, got {type(problem).__name__}")
    return problem


class ErgodicSolver(BaseEstimator):
    def __init__(self, N: int = 64, tolerance: float = 1e-9, scheme: str = "auto",
                 cross_check_time: float | None = None):
        self.N = N
        self.tolerance = tolerance
        self.scheme = scheme
        self.cross_check_time = cross_check_time

    def fit(self, problem, y=None):
        problem = _check_problem(problem)
        sol = solve_ergodic(problem.hamiltonian, problem.coupling, problem.grid(self.N), self.tolerance,
                            scheme=self.scheme, cross_check_time=self.cross_check_time)
        self.solution_ = sol
        self.lambda_ = sol.lam
        self.v_ = sol.v
        self.residual_ = sol.residual
        return self

    def normalized_problem(self, problem) -> ProblemSpec:
        """The same problem with H shifted so its ergodic constant is zero."""
        check_is_fitted(self, "lambda_")
        return ProblemSpec(normalize_spec(problem.hamiltonian, self.lambda_), problem.coupling)


class MatherLP(BaseEstimator):
    def __init__(self, N: int = 64, Nq: int = 17, Qmax: float = 3.0, method: str = "highs-ds"):
        self.N = N
        self.Nq = Nq
        self.Qmax = Qmax
        self.method = method

    def fit(self, problem, y=None):
        problem = _check_problem(problem)
        grid = problem.grid(self.N)
        self.vgrid_ = VelocityGrid(self.Qmax, self.Nq, problem.d)
        self.lp_ = assemble_lp(problem.hamiltonian, problem.coupling, grid, self.vgrid_)
        self.measure_, self.value_ = solve_mather_lp(self.lp_, self.method)
        self.residual_ = holonomy_residual(self.measure_, problem.hamiltonian, problem.coupling)
        return self

    def score(self, problem, y=None) -> float:
        """Negative LP value, which estimates the ergodic constant."""
        check_is_fitted(self, "value_")
        return -self.value_


class AdjointMeasure(BaseEstimator):
    """Measure obtained from the adjoint density of a regularised solution."""

    def __init__(self, N: int = 64, eps: float = 0.1, x0=0.0, k: int = 0, Nq: int = 17,
                 Qmax: float | None = None):
        self.N = N
        self.eps = eps
        self.x0 = x0
        self.k = k
        self.Nq = Nq
        self.Qmax = Qmax

    def fit(self, problem, y=None):
        problem = _check_problem(problem)
        grid = problem.grid(self.N)
        spec, c = problem.hamiltonian, problem.coupling
        erg = solve_ergodic(spec, c, grid)
        spec = normalize_spec(spec, erg.lam)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            v0 = mollify(erg.v, grid, self.eps**4)
        self.slab_ = solve_cauchy_regularized(spec, c, self.eps, v0, grid)
        qmax = self.Qmax
        if qmax is None:
            qmax = float(np.ceil(max(lipschitz_constant(f, grid.h) for f in self.slab_.frames) + 1))
        self.vgrid_ = VelocityGrid(qmax, self.Nq, problem.d)
        self.density_ = solve_adjoint(spec, c, self.eps, self.slab_, grid.nearest_node(self.x0), self.k)
        self.measure_ = measure_from_adjoint(spec, self.slab_, self.density_, self.vgrid_)
        self.action_ = action(self.measure_, spec)
        self.residual_ = holonomy_residual(self.measure_, spec, c)
        self.lambda_ = erg.lam
        return self


class UniquenessSet(BaseEstimator):
    def __init__(self, N: int = 64, Nq: int = 17, Qmax: float = 3.0, n_samples: int = 32,
                 mass_threshold: float = 1e-6, seed: int = 0):
        self.N = N
        self.Nq = Nq
        self.Qmax = Qmax
        self.n_samples = n_samples
        self.mass_threshold = mass_threshold
        self.seed = seed

    def fit(self, problem, y=None):
        problem = _check_problem(problem)
        grid = problem.grid(self.N)
        lp = assemble_lp(problem.hamiltonian, problem.coupling, grid, VelocityGrid(self.Qmax, self.Nq, problem.d))
        mu, value = solve_mather_lp(lp)
        self.measures_ = [mu] + sample_optimal_face(lp, value, self.n_samples, self.seed)
        self.set_ = uniqueness_set(self.measures_, self.mass_threshold)
        self.grid_ = grid
        return self

    def predict(self, nodes):
        """Membership flags for ``(node_tuple, component)`` pairs."""
        check_is_fitted(self, "set_")
        return np.array([(tuple(n), int(i)) in self.set_ for n, i in nodes], dtype=bool)


class Mollifier(TransformerMixin, BaseEstimator):
    """Periodic bump convolution of grid functions (stateless)."""

    def __init__(self, N: int = 64, d: int = 1, m: int = 1, delta: float = 0.05):
        self.N = N
        self.d = d
        self.m = m
        self.delta = delta

    def fit(self, X=None, y=None):
        self.grid_ = PeriodicGrid(self.d, self.N, self.m)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        X = check_grid_function(X, self.grid_, "X")
        return mollify(X, self.grid_, self.delta)

"""Numerical weak-KAM toolkit for weakly coupled Hamilton-Jacobi systems on the flat torus."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AssumptionReport,
    CouplingMatrix,
    ExpressionPotential,
    HamiltonianSpec,
    TablePotential,
    apply_coupling,
    check_assumptions,
    eval_hamiltonian,
    eval_lagrangian,
    hamiltonian_derivatives,
    quadratic_spec,
)
from .evolve import (  # noqa: E402
    AdjointDensity,
    ErgodicSolution,
    TimeSlab,
    convexity_defect,
    normalize_spec,
    solve_adjoint,
    solve_cauchy_regularized,
    solve_ergodic,
)
from .grid import PeriodicGrid, discrete_laplacian, make_grid, mollify, numerical_hamiltonian, one_sided_differences  # noqa: E402
from .mather import (  # noqa: E402
    DiscreteMeasure,
    HolonomyLP,
    VelocityGrid,
    action,
    assemble_lp,
    holonomy_residual,
    measure_from_adjoint,
    solve_mather_lp,
    uniqueness_set,
)
from .estimators import AdjointMeasure, ErgodicSolver, MatherLP, Mollifier, ProblemSpec, UniquenessSet  # noqa: E402
from .verify import check_comparison, eikonal_solutions, example_measure, uniqueness_set_check  # noqa: E402

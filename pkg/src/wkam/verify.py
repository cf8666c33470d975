"""Explicit solutions of the component-constant quadratic family and checks built on them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CouplingMatrix
from .grid import PeriodicGrid
from .mather import DiscreteMeasure, VelocityGrid
from ._validation import check_grid_function


class PreconditionError(ValueError):
    pass


def _component_constant_potential(potential, grid: PeriodicGrid) -> np.ndarray:
    f = grid.sample(potential)
    if not np.allclose(f, f[0], rtol=0, atol=1e-12):
        raise PreconditionError("potential differs between components; explicit solutions need f(., i) identical")
    return f[0]


def weighted_distance(f_values, grid: PeriodicGrid, anchor_node: int) -> np.ndarray:
    """Periodic distance int sqrt(2 f) from ``anchor_node`` along the shorter arc (trapezoid rule)."""
    s = np.sqrt(2.0 * np.maximum(f_values, 0.0))
    seg = 0.5 * (s + np.roll(s, -1)) * grid.h  # cost of the cell [x_k, x_{k+1}]
    seg = np.roll(seg, -anchor_node)
    forward = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    total = seg.sum()
    dist = np.minimum(forward, total - forward)
    return np.roll(dist, anchor_node)


def eikonal_solutions(potential, anchors, grid: PeriodicGrid, values=None, zero_tol: float = 1e-10) -> np.ndarray:
    """v(x, i) = min_a (values_a + d_f(x, a)) for anchors a in the zero set of f (d = 1).

    ``anchors`` are coordinates in [0, 1); each is snapped to its nearest node.
    """
    if grid.d != 1:
        raise ValueError("explicit solutions are available for d = 1 only")
    anchors = list(np.atleast_1d(anchors))
    if not anchors:
        raise ValueError("need at least one anchor")
    values = np.zeros(len(anchors)) if values is None else np.asarray(values, dtype=float).ravel()
    if len(values) != len(anchors):
        raise ValueError(f"{len(values)} anchor values for {len(anchors)} anchors")
    f = _component_constant_potential(potential, grid)
    w = np.full(grid.N, np.inf)
    for a, val in zip(anchors, values):
        node = grid.nearest_node(a)[0]
        if f[node] > zero_tol:
            raise PreconditionError(f"anchor {a} is not in the zero set of f (f = {f[node]:.3e})")
        w = np.minimum(w, val + weighted_distance(f, grid, node))
    return np.broadcast_to(w, (grid.m, grid.N)).copy()


def example_measure(grid: PeriodicGrid, vgrid: VelocityGrid, x0_node, potential=None,
                    weights=None, zero_tol: float = 1e-10) -> DiscreteMeasure:
    """Atoms at (x0, q = 0, i) with weight 1/m each, or ``weights`` if given."""
    node = tuple(int(k) % grid.N for k in np.atleast_1d(x0_node))
    if potential is not None:
        x = grid.points[node]
        vals = [float(potential(x, i)) for i in range(grid.m)]
        if max(vals) > zero_tol:
            raise PreconditionError(f"x0 = {x} is not a common zero of f (values {vals})")
    weights = np.full(grid.m, 1.0 / grid.m) if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != (grid.m,):
        raise ValueError(f"need {grid.m} component weights")
    atoms = [(i, node, vgrid.zero_index, weights[i]) for i in range(grid.m)]
    return DiscreteMeasure.from_atoms(grid, vgrid, atoms)


# ---------------------------------------------------------------------------
# Comparison principle
# ---------------------------------------------------------------------------

SILENT = "hypothesis not satisfied; theorem silent"


@dataclass
class ComparisonReport:
    hypothesis_margin: float
    conclusion_margin: float
    integrals: list
    hypothesis_holds: bool
    conclusion_holds: bool
    tol_hyp: float
    tol_con: float
    status: str

    @property
    def verdict(self) -> bool:
        """False only when the hypothesis holds and the conclusion fails."""
        return (not self.hypothesis_holds) or self.conclusion_holds

    def as_dict(self) -> dict:
        return {
            "hypothesis_margin": self.hypothesis_margin,
            "conclusion_margin": self.conclusion_margin,
            "integrals": self.integrals,
            "hypothesis_holds": self.hypothesis_holds,
            "conclusion_holds": self.conclusion_holds,
            "verdict": self.verdict,
            "tol_hyp": self.tol_hyp,
            "tol_con": self.tol_con,
            "status": self.status,
        }


def check_comparison(v1, v2, measures, tol_hyp: float = 1e-3, tol_con: float | None = None) -> ComparisonReport:
    """Test "int v1 dmu <= int v2 dmu for every mu" => "v1 <= v2 everywhere"."""
    measures = list(measures)
    if not measures:
        raise ValueError("need at least one measure")
    grid = measures[0].grid
    v1 = check_grid_function(v1, grid, "v1")
    v2 = check_grid_function(v2, grid, "v2")
    if tol_con is None:
        tol_con = tol_hyp + 4 * grid.h
    integrals = []
    for mu in measures:
        if mu.grid != grid:
            raise ValueError("measures live on different grids")
        integrals.append((mu.integrate(v1), mu.integrate(v2)))
    hyp = min(b - a for a, b in integrals)
    con = float((v2 - v1).min())
    hyp_ok = hyp >= -tol_hyp
    con_ok = con >= -tol_con
    if not hyp_ok:
        status = SILENT
    else:
        status = "pass" if con_ok else "violation"
    return ComparisonReport(hyp, con, integrals, hyp_ok, con_ok, tol_hyp, tol_con, status)


@dataclass
class UniquenessCheck:
    held: bool
    vacuous: bool
    max_on_set: float
    max_global: float
    tol: float
    tol_global: float

    def __bool__(self) -> bool:
        return self.held


def uniqueness_set_check(v1, v2, M, grid: PeriodicGrid, tol: float = 1e-8,
                         tol_global: float | None = None) -> UniquenessCheck:
    """If |v1 - v2| <= tol on M, require |v1 - v2| <= tol_global everywhere."""
    if not M:
        raise ValueError("uniqueness set is empty")
    v1 = check_grid_function(v1, grid, "v1")
    v2 = check_grid_function(v2, grid, "v2")
    if tol_global is None:
        tol_global = tol + 2 * grid.h
    diff = np.abs(v1 - v2)
    on_set = max(float(diff[(i,) + tuple(node)]) for node, i in M)
    glob = float(diff.max())
    if on_set > tol:
        return UniquenessCheck(True, True, on_set, glob, tol, tol_global)
    return UniquenessCheck(glob <= tol_global, False, on_set, glob, tol, tol_global)


# ---------------------------------------------------------------------------
# Duality between two regularised solutions and the adjoint measure
# ---------------------------------------------------------------------------


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    bound: float
    identity_error: float
    h: float
    meta: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        """lhs - rhs; the inequality asks this to be at most ``bound``."""
        return self.lhs - self.rhs

    @property
    def constant(self) -> float:
        return self.bound / self.h

    @property
    def holds(self) -> bool:
        return self.slack <= self.bound + 1e-12

    def as_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "bound": self.bound,
                "C": self.constant, "h": self.h, "identity_error": self.identity_error, "holds": self.holds,
                **self.meta}


def duality_check(spec, c: CouplingMatrix, eps: float, u1, u2, sigma) -> DualityReport:
    """Compare (u1 - u2)(x0, 1, k) with the time-averaged pairing against sigma.

    With P(n) = sum (u1 - u2)^n sigma^n h^d and E the convexity defect,
    P(n+1) - P(n) = (dt/eps) sum E^n sigma^{n+1} h^d exactly, so
    lhs - rhs = (1/eps) sum_n dt t_{n+1} sum E^n sigma^{n+1} h^d.  The bound
    keeps only the positive part of E.
    """
    from .evolve import convexity_defect_field

    grid = u2.grid
    vol, dt = grid.cell_volume, u2.dt
    du = u1.frames - u2.frames
    axes = tuple(range(1, du.ndim))
    P = np.sum(du * sigma.frames, axis=axes) * vol
    n_steps = u2.n_steps
    lhs = float(P[n_steps])
    rhs = float(dt * P[:n_steps].sum())
    E = convexity_defect_field(spec, c, u1, u2, eps)
    t_next = dt * np.arange(1, n_steps + 1)
    weights = (dt / eps) * t_next
    S = np.sum(E * sigma.frames[1:], axis=axes) * vol
    Splus = np.sum(np.maximum(E, 0) * sigma.frames[1:], axis=axes) * vol
    identity = float(weights @ S)
    bound = float(weights @ Splus)
    return DualityReport(lhs, rhs, bound, abs((lhs - rhs) - identity), grid.h,
                         {"eps": eps, "x0_node": list(sigma.x0_node), "k": sigma.k,
                          "max_defect": float(E.max())})

"""Discrete holonomic measures, the action-minimising LP and measures built from adjoint densities."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .core import CouplingMatrix
from .grid import PeriodicGrid, central_gradient
from .simplex import SimplexError, solve_simplex

DEFAULT_ATOM_BUDGET = 2_000_000


class TruncationError(ValueError):
    """A velocity fell outside the truncated velocity box."""


class LPError(RuntimeError):
    pass


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform lattice on [-Qmax, Qmax]^d with an odd node count so that q = 0 is a node."""

    Qmax: float
    Nq: int
    d: int = 1

    def __post_init__(self):
        if not self.Qmax > 0:
            raise ValueError(f"Qmax must be positive, got {self.Qmax}")
        if self.Nq < 3 or self.Nq % 2 == 0:
            raise ValueError(f"Nq must be odd and at least 3, got {self.Nq}")
        if self.d not in (1, 2):
            raise ValueError(f"unsupported dimension d={self.d}")

    @property
    def hq(self) -> float:
        return 2.0 * self.Qmax / (self.Nq - 1)

    @property
    def n_nodes(self) -> int:
        return self.Nq**self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.Qmax, self.Qmax, self.Nq)

    @cached_property
    def points(self) -> np.ndarray:
        """Velocity nodes, shape (Nq^d, d), C-order."""
        mesh = np.meshgrid(*[self.axis] * self.d, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.d)

    @property
    def zero_index(self) -> int:
        mid = self.Nq // 2
        return mid if self.d == 1 else mid * self.Nq + mid

    def snap(self, q) -> np.ndarray:
        """Index of the nearest node for each velocity in ``q`` (..., d)."""
        q = np.asarray(q, dtype=float)
        worst = float(np.abs(q).max()) if q.size else 0.0
        if worst > self.Qmax * (1 + 1e-12):
            raise TruncationError(f"velocity {worst:.4g} outside [-Qmax, Qmax] with Qmax={self.Qmax}; "
                                  "increase Qmax")
        k = np.clip(np.rint((q + self.Qmax) / self.hq).astype(np.int64), 0, self.Nq - 1)
        if self.d == 1:
            return k[..., 0]
        return k[..., 0] * self.Nq + k[..., 1]


@dataclass
class DiscreteMeasure:
    """Nonnegative unit-mass weights indexed (component, x-node, q-node)."""

    grid: PeriodicGrid
    vgrid: VelocityGrid
    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        expected = (self.grid.m, self.grid.n_nodes, self.vgrid.n_nodes)
        if w.shape != expected:
            raise ValueError(f"weights have shape {w.shape}, expected {expected}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite values")
        if w.min() < -1e-12:
            raise ValueError(f"negative weight {w.min():.3e}")
        w = np.maximum(w, 0.0)
        total = w.sum()
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"measure has mass {total!r}, expected 1")
        self.weights = w

    @classmethod
    def from_atoms(cls, grid, vgrid, atoms, normalize: bool = False) -> "DiscreteMeasure":
        """Build from (component, node index tuple, q index, weight) entries."""
        w = np.zeros((grid.m, grid.n_nodes, vgrid.n_nodes))
        for i, node, qi, wt in atoms:
            flat = int(np.ravel_multi_index(tuple(np.atleast_1d(node)), grid.shape))
            w[i, flat, qi] += wt
        if normalize:
            w /= w.sum()
        return cls(grid, vgrid, w)

    def component_masses(self) -> np.ndarray:
        return self.weights.sum(axis=(1, 2))

    def node_component_masses(self) -> np.ndarray:
        """Projected mass on (component, node), shape (m, n_nodes)."""
        return self.weights.sum(axis=2)

    def x_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=(0, 2))

    def q_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=(0, 1))

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.weights))

    def atoms(self):
        """Nonzero atoms as arrays (component, node, q-node, weight)."""
        i, n, k = np.nonzero(self.weights)
        return i, n, k, self.weights[i, n, k]

    def integrate(self, values) -> float:
        """sum w(i, x, q) values(i, x); ``values`` is a grid function."""
        vals = np.asarray(values, dtype=float).reshape(self.grid.m, self.grid.n_nodes)
        return float(np.sum(self.node_component_masses() * vals))


# ---------------------------------------------------------------------------
# Holonomy constraints
# ---------------------------------------------------------------------------


def _neighbour_tables(grid: PeriodicGrid):
    idx = np.arange(grid.n_nodes).reshape(grid.shape)
    plus = [np.roll(idx, -1, axis=a).ravel() for a in range(grid.d)]
    minus = [np.roll(idx, 1, axis=a).ravel() for a in range(grid.d)]
    return plus, minus


def holonomy_matrix(grid: PeriodicGrid, vgrid: VelocityGrid, c: CouplingMatrix) -> sp.csr_matrix:
    """Rows (j, y) x columns (i, x, q): sum of w (q.D phi + Theta phi) for phi the indicator of (y, j).

    The transport part uses the upwind generator
    q_k+ (phi(x+e_k) - phi(x))/h + q_k- (phi(x) - phi(x-e_k))/h, i.e. the
    central difference plus the viscous term (h/2)|q_k| Lap_k phi.
    """
    if c.m != grid.m:
        raise ValueError(f"coupling has {c.m} components, grid has {grid.m}")
    n, nq, m, h = grid.n_nodes, vgrid.n_nodes, grid.m, grid.h
    plus, minus = _neighbour_tables(grid)
    Q = vgrid.points
    x_of = np.repeat(np.arange(n), nq)
    q_of = np.tile(np.arange(nq), n)
    rows, cols, vals = [], [], []
    T = c.generator
    for i in range(m):
        col = i * n * nq + x_of * nq + q_of
        diag = np.zeros(n * nq)
        for k in range(grid.d):
            qk = Q[q_of, k]
            up = np.maximum(qk, 0.0) / h
            down = np.maximum(-qk, 0.0) / h
            diag -= up + down
            sel = up > 0
            rows.append(i * n + plus[k][x_of[sel]]); cols.append(col[sel]); vals.append(up[sel])
            sel = down > 0
            rows.append(i * n + minus[k][x_of[sel]]); cols.append(col[sel]); vals.append(down[sel])
        sel = diag != 0
        rows.append(i * n + x_of[sel]); cols.append(col[sel]); vals.append(diag[sel])
        for j in range(m):
            if T[i, j] != 0:
                rows.append(j * n + x_of); cols.append(col); vals.append(np.full(n * nq, T[i, j]))
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m * n, m * n * nq))
    return A.tocsr()


def holonomy_residual(mu: DiscreteMeasure, spec=None, c: CouplingMatrix | None = None) -> float:
    """Largest absolute holonomy row over the nodal indicator test basis."""
    if c is None:
        raise ValueError("a coupling matrix is required")
    if spec is not None and (spec.d != mu.grid.d or spec.m != mu.grid.m):
        raise ValueError("measure grid does not match the Hamiltonian")
    A = holonomy_matrix(mu.grid, mu.vgrid, c)
    return float(np.abs(A @ mu.weights.ravel()).max())


def lagrangian_table(spec, grid: PeriodicGrid, vgrid: VelocityGrid) -> np.ndarray:
    """L(x, q, i) on every atom, shape (m, n_nodes, n_q)."""
    X = grid.points.reshape(-1, grid.d)
    Qp = vgrid.points
    xx = np.repeat(X, len(Qp), axis=0)
    qq = np.tile(Qp, (len(X), 1))
    return np.stack([np.asarray(spec.lagrangian(xx, qq, i)).reshape(grid.n_nodes, vgrid.n_nodes)
                     for i in range(grid.m)])


def action(mu: DiscreteMeasure, spec) -> float:
    """sum over atoms of w L(x, q, i)."""
    i, n, k, w = mu.atoms()
    if len(w) == 0:
        return 0.0
    X = mu.grid.points.reshape(-1, mu.grid.d)[n]
    Q = mu.vgrid.points[k]
    total = 0.0
    for comp in np.unique(i):
        sel = i == comp
        total += float(np.sum(w[sel] * spec.lagrangian(X[sel], Q[sel], int(comp))))
    return total


# ---------------------------------------------------------------------------
# The LP
# ---------------------------------------------------------------------------


@dataclass
class HolonomyLP:
    objective: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    grid: PeriodicGrid
    vgrid: VelocityGrid
    eta: float
    meta: dict = field(default_factory=dict)

    @property
    def n_atoms(self) -> int:
        return self.objective.size

    @property
    def n_test_rows(self) -> int:
        return self.A_eq.shape[0] - 1

    def measure(self, x) -> DiscreteMeasure:
        w = np.maximum(np.asarray(x, dtype=float), 0.0)
        w = w / w.sum()
        return DiscreteMeasure(self.grid, self.vgrid, w.reshape(self.grid.m, self.grid.n_nodes, self.vgrid.n_nodes))


def assemble_lp(spec, c: CouplingMatrix, grid: PeriodicGrid, vgrid: VelocityGrid,
                atom_budget: int = DEFAULT_ATOM_BUDGET) -> HolonomyLP:
    if spec.d != grid.d or spec.m != grid.m or vgrid.d != grid.d:
        raise ValueError("Hamiltonian, grid and velocity grid dimensions disagree")
    n_atoms = grid.m * grid.n_nodes * vgrid.n_nodes
    if n_atoms > atom_budget:
        raise ValueError(f"LP would have {n_atoms} atoms, above the budget of {atom_budget}")
    A = holonomy_matrix(grid, vgrid, c)
    A_eq = sp.vstack([A, sp.csr_matrix(np.ones((1, n_atoms)))], format="csr")
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[-1] = 1.0
    obj = lagrangian_table(spec, grid, vgrid).ravel()
    return HolonomyLP(obj, A_eq, b_eq, grid, vgrid, 0.5 * grid.h,
                      {"n_atoms": n_atoms, "n_rows": A_eq.shape[0]})


def _linprog(cost, A_eq, b_eq, method, A_ub=None, b_ub=None):
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method=method)
    if res.status == 2:
        raise LPError(f"LP infeasible: {res.message}")
    if res.status == 3:
        raise LPError(f"internal error: LP reported unbounded ({res.message})")
    if res.status != 0:
        raise LPError(f"LP solver failed: {res.message}")
    return res.x


def _most_violated(lp: HolonomyLP, x) -> str:
    r = lp.A_eq @ x - lp.b_eq
    k = int(np.argmax(np.abs(r)))
    return f"row {k} residual {r[k]:.3e}"


def solve_mather_lp(lp: HolonomyLP, method: str = "highs-ds") -> tuple[DiscreteMeasure, float]:
    """Minimise the action over the discrete holonomic probability measures.

    ``method`` is any scipy ``linprog`` method, or ``"simplex"`` for the
    built-in dense Bland's-rule simplex (small problems only).
    """
    if method == "simplex":
        if lp.n_atoms > 5000:
            raise ValueError("built-in simplex is meant for at most 5000 atoms")
        try:
            x = solve_simplex(lp.objective, lp.A_eq, lp.b_eq).x
        except SimplexError as exc:
            raise LPError(str(exc)) from exc
    else:
        x = _linprog(lp.objective, lp.A_eq, lp.b_eq, method)
    viol = float(np.abs(lp.A_eq @ x - lp.b_eq).max())
    if viol > 1e-7:
        raise LPError(f"solution violates constraints: {_most_violated(lp, x)}")
    mu = lp.measure(x)
    mu.meta["solver"] = method
    return mu, float(lp.objective @ mu.weights.ravel())


def sample_optimal_face(lp: HolonomyLP, value: float, n_samples: int = 32, seed: int = 0,
                        face_tol: float = 1e-8, method: str = "highs-ds") -> list[DiscreteMeasure]:
    """Vertices of the optimal face found by minimising random nonnegative objectives on it."""
    rng = np.random.default_rng(seed)
    out = []
    A_ub = sp.csr_matrix(lp.objective.reshape(1, -1))
    b_ub = np.array([value + face_tol])
    for _ in range(n_samples):
        r = rng.random(lp.n_atoms)
        x = _linprog(r, lp.A_eq, lp.b_eq, method, A_ub=A_ub, b_ub=b_ub)
        out.append(lp.measure(x))
    return out


def uniqueness_set(measures, mass_threshold: float = 1e-6, dilate: bool = True) -> set:
    """Union of thresholded (node, component) supports, optionally grown by one cell.

    Returns a set of ``(node_index_tuple, component)``.
    """
    measures = list(measures)
    if not measures:
        raise ValueError("need at least one measure")
    grid = measures[0].grid
    mask = np.zeros((grid.m,) + grid.shape, dtype=bool)
    for mu in measures:
        if mu.grid != grid:
            raise ValueError("measures live on different grids")
        mask |= (mu.node_component_masses() >= mass_threshold).reshape(mask.shape)
    if dilate and mask.any():
        grown = mask.copy()
        for a in range(1, grid.d + 1):
            grown = grown | np.roll(grown, 1, axis=a) | np.roll(grown, -1, axis=a)
        mask = grown
    comps = np.argwhere(mask)
    return {(tuple(int(v) for v in row[1:]), int(row[0])) for row in comps}


# ---------------------------------------------------------------------------
# Measures from the adjoint density
# ---------------------------------------------------------------------------


def measure_from_adjoint(spec, u2, sigma, vgrid: VelocityGrid, return_momentum: bool = False):
    """Time average of sigma against p = D_h u2, pushed forward to q = D_pH(x, p, i).

    Each (step n < N_t, node, component) contributes sigma^n h^d dt at the
    velocity node nearest to q.  With ``return_momentum`` the un-pushed
    measure (atoms snapped at p) is returned as well.
    """
    grid = u2.grid
    if sigma.slab.grid != grid or sigma.frames.shape != u2.frames.shape:
        raise ValueError("adjoint density and slab do not match")
    if vgrid.d != grid.d:
        raise ValueError("velocity grid dimension does not match")
    n_steps = u2.n_steps
    m, n, nq = grid.m, grid.n_nodes, vgrid.n_nodes
    wq = np.zeros(m * n * nq)
    wp = np.zeros(m * n * nq) if return_momentum else None
    node_ids = np.arange(n)
    scale = grid.cell_volume * u2.dt
    for t in range(n_steps):
        grad = np.moveaxis(central_gradient(u2.frames[t], grid.h), 0, -1).reshape(m, n, grid.d)
        mass = sigma.frames[t].reshape(m, n) * scale
        for i in range(m):
            q = spec.kinetic_grad(grad[i], i)
            idx = i * n * nq + node_ids * nq + vgrid.snap(q)
            wq += np.bincount(idx, weights=mass[i], minlength=m * n * nq)
            if wp is not None:
                idx = i * n * nq + node_ids * nq + vgrid.snap(grad[i])
                wp += np.bincount(idx, weights=mass[i], minlength=m * n * nq)
    mu = DiscreteMeasure(grid, vgrid, (wq / wq.sum()).reshape(m, n, nq),
                         {"source": "adjoint", "eps": sigma.eps, "x0_node": sigma.x0_node, "k": sigma.k})
    if wp is None:
        return mu
    nu = DiscreteMeasure(grid, vgrid, (wp / wp.sum()).reshape(m, n, nq), {"source": "adjoint-momentum"})
    return mu, nu

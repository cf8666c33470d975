"""Periodic grids on the unit torus and the discrete calculus built on them.

Grid functions are plain arrays of shape ``(m, N)`` (d = 1) or ``(m, N, N)``
(d = 2): component first, then the spatial axes.  Difference stacks carry an
extra leading axis of length ``d``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class PeriodicGrid:
    d: int
    N: int
    m: int = 1

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"unsupported dimension d={self.d}; only 1 and 2 are supported")
        if self.N < 8:
            raise ValueError(f"need at least 8 nodes per dimension, got N={self.N}")
        if self.m < 1:
            raise ValueError(f"need at least one component, got m={self.m}")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.N**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, d)``."""
        axes = [np.arange(self.N) * self.h] * self.d
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def nearest_node(self, x) -> tuple[int, ...]:
        x = np.mod(np.atleast_1d(np.asarray(x, dtype=float)), 1.0)
        return tuple(int(k) for k in np.rint(x * self.N).astype(int) % self.N)

    def zeros(self) -> np.ndarray:
        return np.zeros((self.m,) + self.shape)

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func(points, i)`` for every component."""
        return np.stack([np.asarray(func(self.points, i), dtype=float) for i in range(self.m)])

    # -- sparse operators on a single component (flattened C-order) ----------

    @cached_property
    def _shift_matrices(self):
        n = self.N
        eye = sp.identity(n, format="csr")
        fwd1 = sp.csr_matrix((np.ones(n), (np.arange(n), (np.arange(n) + 1) % n)), shape=(n, n))
        if self.d == 1:
            return [fwd1], eye
        return [sp.kron(fwd1, eye, format="csr"), sp.kron(eye, fwd1, format="csr")], sp.identity(n * n, format="csr")

    def forward_difference_matrices(self):
        shifts, eye = self._shift_matrices
        return [((s - eye) / self.h).tocsr() for s in shifts]

    def backward_difference_matrices(self):
        shifts, eye = self._shift_matrices
        return [((eye - s.T) / self.h).tocsr() for s in shifts]

    def laplacian_matrix(self):
        shifts, eye = self._shift_matrices
        lap = sum(s + s.T - 2 * eye for s in shifts) / self.h**2
        return lap.tocsr()


def make_grid(d: int, N: int, m: int) -> PeriodicGrid:
    return PeriodicGrid(d, N, m)


def _spatial_axes(values) -> tuple[int, ...]:
    return tuple(range(1, np.ndim(values)))


def one_sided_differences(values, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward differences (p_minus, p_plus), each of shape ``(d, *values.shape)``."""
    values = np.asarray(values, dtype=float)
    axes = _spatial_axes(values)
    pm = np.stack([(values - np.roll(values, 1, axis=a)) / h for a in axes])
    pp = np.stack([(np.roll(values, -1, axis=a) - values) / h for a in axes])
    return pm, pp


def central_gradient(values, h: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.stack([(np.roll(values, -1, axis=a) - np.roll(values, 1, axis=a)) / (2 * h)
                     for a in _spatial_axes(values)])


def discrete_laplacian(values, h: float) -> np.ndarray:
    """(2d+1)-point periodic Laplacian, applied per component."""
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    for a in _spatial_axes(values):
        out += np.roll(values, -1, axis=a) + np.roll(values, 1, axis=a) - 2 * values
    return out / h**2


def lipschitz_constant(values, h: float) -> float:
    """Largest one-sided difference quotient in absolute value."""
    _, pp = one_sided_differences(values, h)
    return float(np.abs(pp).max())


# ---------------------------------------------------------------------------
# Numerical Hamiltonians
# ---------------------------------------------------------------------------


def numerical_hamiltonian(spec, x, p_minus, p_plus, i: int, theta: float) -> float:
    """Lax-Friedrichs flux at a single node: H(x, (p- + p+)/2, i) - theta/2 sum_k (p+_k - p-_k)."""
    p_minus = np.atleast_1d(np.asarray(p_minus, dtype=float))
    p_plus = np.atleast_1d(np.asarray(p_plus, dtype=float))
    mid = 0.5 * (p_minus + p_plus)
    return float(spec.hamiltonian(np.atleast_1d(x), mid, i) - 0.5 * theta * np.sum(p_plus - p_minus))


def lax_friedrichs_hamiltonian(spec, grid: PeriodicGrid, pm, pp, theta: float) -> np.ndarray:
    """Vectorised Lax-Friedrichs flux over all nodes; ``pm``/``pp`` as from one_sided_differences."""
    mid = np.moveaxis(0.5 * (pm + pp), 0, -1)
    out = np.empty(pm.shape[1:])
    for i in range(grid.m):
        out[i] = spec.hamiltonian(grid.points, mid[i], i)
    return out - 0.5 * theta * np.sum(pp - pm, axis=0)


def upwind_momentum(pm, pp) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate upwind selection for kinetic terms increasing in |p_k|.

    Returns ``(P, use_backward)`` with P_k = max(p-_k, 0) when that dominates
    max(-p+_k, 0), otherwise min(p+_k, 0).  ``use_backward`` is +1 where the
    backward difference was picked, -1 for the forward one, 0 where P_k = 0.
    """
    a = np.maximum(pm, 0.0)
    b = np.maximum(-pp, 0.0)
    back = a >= b
    P = np.where(back, a, -b)
    sel = np.where(back, np.where(a > 0, 1, 0), -1).astype(np.int8)
    return P, sel


def godunov_hamiltonian(spec, grid: PeriodicGrid, pm, pp) -> np.ndarray:
    """Monotone upwind flux G_i(P) - f + shift for coordinatewise-monotone kinetic terms."""
    P, _ = upwind_momentum(pm, pp)
    P = np.moveaxis(P, 0, -1)
    out = np.empty(pm.shape[1:])
    for i in range(grid.m):
        out[i] = spec.hamiltonian(grid.points, P[i], i)
    return out


def resolve_scheme(spec, scheme: str) -> str:
    if scheme == "auto":
        return "upwind" if spec.coordinatewise_monotone else "lax-friedrichs"
    if scheme not in ("upwind", "lax-friedrichs"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "upwind" and not spec.coordinatewise_monotone:
        raise ValueError("upwind flux needs a kinetic term increasing in each |p_k|; use lax-friedrichs")
    return scheme


def scheme_hamiltonian(spec, grid: PeriodicGrid, values, scheme: str, theta: float) -> np.ndarray:
    pm, pp = one_sided_differences(values, grid.h)
    if scheme == "upwind":
        return godunov_hamiltonian(spec, grid, pm, pp)
    return lax_friedrichs_hamiltonian(spec, grid, pm, pp, theta)


def dissipation_bound(spec, grid: PeriodicGrid, radius: float, n_samples: int = 64) -> float:
    """max_k |d H / d p_k| over nodes sampled from the grid and p in the box [-radius, radius]^d."""
    lin = np.linspace(-radius, radius, 9)
    box = np.stack(np.meshgrid(*[lin] * grid.d, indexing="ij"), axis=-1).reshape(-1, grid.d)
    pts = grid.points.reshape(-1, grid.d)
    step = max(1, len(pts) // n_samples)
    pts = pts[::step]
    best = 0.0
    for i in range(grid.m):
        xx = np.repeat(pts, len(box), axis=0)
        pp = np.tile(box, (len(pts), 1))
        best = max(best, float(np.abs(spec.grad_p(xx, pp, i)).max()))
    return best


# ---------------------------------------------------------------------------
# Mollifier
# ---------------------------------------------------------------------------


def _bump(r2):
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def mollifier_weights(grid: PeriodicGrid, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Offsets (in nodes) and normalised weights of the discretised bump of radius ``delta``."""
    reach = int(np.ceil(delta / grid.h))
    ks = np.arange(-reach, reach + 1)
    offs = np.stack(np.meshgrid(*[ks] * grid.d, indexing="ij"), axis=-1).reshape(-1, grid.d)
    r2 = np.sum((offs * grid.h / delta) ** 2, axis=1)
    w = _bump(r2)
    keep = w > 0
    offs, w = offs[keep], w[keep]
    return offs, w / w.sum()


def mollify(values, grid: PeriodicGrid, delta: float) -> np.ndarray:
    """Periodic convolution with the standard bump of radius ``delta``, per component.

    The discrete kernel is renormalised to unit mass.  Kernels narrower than
    two cells are under-resolved: a warning is issued and the input returned.
    """
    if not delta > 0:
        raise ValueError(f"mollifier width must be positive, got {delta}")
    values = np.asarray(values, dtype=float)
    if delta < 2 * grid.h:
        warnings.warn(
            f"mollifier width {delta:.3g} < 2h = {2 * grid.h:.3g}; kernel under-resolved, returning input",
            RuntimeWarning, stacklevel=2,
        )
        return values.copy()
    offs, w = mollifier_weights(grid, delta)
    out = np.zeros_like(values)
    axes = _spatial_axes(values)
    for off, wk in zip(offs, w):
        out += wk * np.roll(values, tuple(int(o) for o in off), axis=axes)
    return out

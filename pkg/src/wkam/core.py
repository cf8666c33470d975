"""Hamiltonians, Lagrangians, the coupling operator and assumption checks.

Component indices are 0-based throughout the Python API.  Points on the torus
are arrays whose last axis has length ``d``; they are reduced modulo 1 before
any potential is evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._validation import check_component, check_finite, check_points

FAMILIES = ("quadratic", "anisotropic", "quartic")


class LegendreError(RuntimeError):
    """Raised when the numeric Legendre transform hits the edge of its p-box."""


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------


class Potential:
    """Base class for f(x, i) >= 0 on the torus."""

    d: int
    m: int

    def __call__(self, x, i: int) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x, i: int) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class ExpressionPotential(Potential):
    """Closed-form potential given as one expression per component.

    Expressions are parsed with sympy; the variables are ``x`` (and ``y`` for
    d = 2; ``x1``/``x2`` are accepted aliases).  A single string is shared by
    every component.
    """

    def __init__(self, expressions: str | Sequence[str], d: int = 1, m: int = 1):
        import sympy

        if isinstance(expressions, str):
            expressions = [expressions] * m
        expressions = list(expressions)
        if len(expressions) != m:
            raise ValueError(f"expected {m} potential expressions, got {len(expressions)}")
        if d not in (1, 2):
            raise ValueError(f"unsupported dimension d={d}")
        self.d = d
        self.m = m
        self.expressions = expressions

        syms = sympy.symbols("x y")[:d]
        local = {"x": syms[0], "x1": syms[0], "pi": sympy.pi}
        if d == 2:
            local.update({"y": syms[1], "x2": syms[1]})
        self._f = []
        self._df = []
        for text in expressions:
            expr = sympy.sympify(text, locals=local)
            extra = expr.free_symbols - set(syms)
            if extra:
                raise ValueError(f"unknown symbols in potential {text!r}: {sorted(map(str, extra))}")
            self._f.append(sympy.lambdify(syms, expr, "numpy"))
            self._df.append([sympy.lambdify(syms, sympy.diff(expr, s), "numpy") for s in syms])

    def __call__(self, x, i: int) -> np.ndarray:
        x = np.mod(np.asarray(x, dtype=float), 1.0)
        out = self._f[i](*np.moveaxis(x, -1, 0))
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    def gradient(self, x, i: int) -> np.ndarray:
        x = np.mod(np.asarray(x, dtype=float), 1.0)
        comps = [np.broadcast_to(np.asarray(g(*np.moveaxis(x, -1, 0)), dtype=float), x.shape[:-1])
                 for g in self._df[i]]
        return np.stack(comps, axis=-1)

    def describe(self) -> dict:
        return {"kind": "expression", "expressions": self.expressions}


class TablePotential(Potential):
    """Potential sampled on a uniform periodic grid, interpolated spectrally.

    ``values`` has shape ``(m, N)`` for d = 1 or ``(m, N, N)`` for d = 2, the
    sample at index k sitting at x = k / N.  For even N the Nyquist mode is
    split evenly between +N/2 and -N/2 so the interpolant is real.
    """

    def __init__(self, values, source: str | None = None):
        values = np.asarray(values, dtype=float)
        if values.ndim not in (2, 3):
            raise ValueError("table potential must have shape (m, N) or (m, N, N)")
        if values.ndim == 3 and values.shape[1] != values.shape[2]:
            raise ValueError("2-d table potential must be square")
        if not np.all(np.isfinite(values)):
            raise ValueError("table potential contains non-finite values")
        if np.any(values < 0):
            raise ValueError("table potential must be nonnegative")
        self.values = values
        self.source = source
        self.m = values.shape[0]
        self.d = values.ndim - 1
        n = values.shape[1]
        coef = np.fft.fftn(values, axes=tuple(range(1, values.ndim))) / n**self.d
        freqs = np.fft.fftfreq(n, d=1.0 / n)
        idx = np.arange(n)
        weights = np.ones(n)
        if n % 2 == 0:
            nyq = n // 2
            freqs = np.concatenate([freqs, [nyq]])
            freqs[nyq] = -nyq
            idx = np.concatenate([idx, [nyq]])
            weights = np.concatenate([weights, [0.5]])
            weights[nyq] = 0.5
        self._freqs = freqs
        if self.d == 1:
            self._coef = coef[:, idx] * weights
        else:
            self._coef = coef[:, idx][:, :, idx] * np.multiply.outer(weights, weights)

    def _eval(self, x, i, deriv=None):
        x = np.mod(np.asarray(x, dtype=float), 1.0)
        waves = []
        for k in range(self.d):
            w = np.exp(2j * np.pi * np.multiply.outer(x[..., k], self._freqs))
            if deriv == k:
                w = w * (2j * np.pi * self._freqs)
            waves.append(w)
        if self.d == 1:
            return (waves[0] @ self._coef[i]).real
        return np.einsum("...a,ab,...b->...", waves[0], self._coef[i], waves[1]).real

    def __call__(self, x, i: int) -> np.ndarray:
        return self._eval(x, i)

    def gradient(self, x, i: int) -> np.ndarray:
        return np.stack([self._eval(x, i, deriv=k) for k in range(self.d)], axis=-1)

    def describe(self) -> dict:
        return {"kind": "table", "source": self.source, "shape": list(self.values.shape)}


# ---------------------------------------------------------------------------
# Coupling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingMatrix:
    """Switching rates c[i, j] >= 0.  Diagonal entries are ignored."""

    c: np.ndarray

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"coupling matrix must be square, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coupling matrix contains non-finite entries")
        if np.any(c < 0):
            raise ValueError("coupling rates must be nonnegative")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @property
    def m(self) -> int:
        return self.c.shape[0]

    @property
    def offdiag(self) -> np.ndarray:
        return self.c - np.diag(np.diag(self.c))

    @property
    def generator(self) -> np.ndarray:
        """Matrix T with (Theta phi)_i = sum_j T[i, j] phi_j."""
        off = self.offdiag
        return np.diag(off.sum(axis=1)) - off

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.c, self.c.T))

    @classmethod
    def uniform(cls, m: int, rate: float = 1.0) -> "CouplingMatrix":
        return cls(rate * (np.ones((m, m)) - np.eye(m)))


def apply_coupling(c: CouplingMatrix, phi) -> np.ndarray:
    """(Theta phi)(x, i) = sum_j c[i, j] (phi(x, i) - phi(x, j)); components on axis 0."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape[0] != c.m:
        raise ValueError(f"grid function has {phi.shape[0]} components, coupling has {c.m}")
    off = c.offdiag
    out = np.zeros_like(phi)
    shape = (c.m,) + (1,) * (phi.ndim - 1)
    for j in range(c.m):
        # differences vanish exactly for component-constant phi
        out += off[:, j].reshape(shape) * (phi - phi[j])
    return out


# ---------------------------------------------------------------------------
# Hamiltonian families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianSpec:
    """H(x, p, i) = G_i(p) - f(x, i) + shift for a parametric convex G_i.

    family
        ``quadratic``: G = |p|^2 / 2; ``anisotropic``: G = p.A_i p / 2 with
        ``A`` of shape (m, d, d), symmetric positive definite;
        ``quartic``: G = |p|^4 / 4.
    """

    family: str
    potential: Potential
    d: int = 1
    m: int = 1
    shift: float = 0.0
    A: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown Hamiltonian family {self.family!r}; choose from {FAMILIES}")
        if self.d not in (1, 2):
            raise ValueError(f"unsupported dimension d={self.d}")
        if self.potential.d != self.d or self.potential.m != self.m:
            raise ValueError(
                f"potential is for (d={self.potential.d}, m={self.potential.m}), "
                f"Hamiltonian for (d={self.d}, m={self.m})"
            )
        if not np.isfinite(self.shift):
            raise ValueError("shift must be finite")
        if self.family == "anisotropic":
            if self.A is None:
                raise ValueError("anisotropic family needs the matrices A")
            A = np.array(self.A, dtype=float)
            if A.shape == (self.d, self.d):
                A = np.broadcast_to(A, (self.m, self.d, self.d)).copy()
            if A.shape != (self.m, self.d, self.d):
                raise ValueError(f"A must have shape (m, d, d) = {(self.m, self.d, self.d)}, got {A.shape}")
            for a in A:
                if not np.allclose(a, a.T) or np.linalg.eigvalsh(a).min() <= 0:
                    raise ValueError("each A_i must be symmetric positive definite")
            A.setflags(write=False)
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "_Ainv", np.linalg.inv(A))

    # -- helpers -----------------------------------------------------------

    def with_shift(self, shift: float) -> "HamiltonianSpec":
        return HamiltonianSpec(self.family, self.potential, self.d, self.m, float(shift), self.A)

    @property
    def coordinatewise_monotone(self) -> bool:
        """True when G_i(p) is nondecreasing in each |p_k| (upwind scheme applies)."""
        if self.family != "anisotropic":
            return True
        return all(np.allclose(a, np.diag(np.diag(a))) for a in self.A)

    # -- kinetic part G and its dual ---------------------------------------

    def kinetic(self, p, i):
        p = np.asarray(p, dtype=float)
        if self.family == "quadratic":
            return 0.5 * np.sum(p * p, axis=-1)
        if self.family == "quartic":
            return 0.25 * np.sum(p * p, axis=-1) ** 2
        return 0.5 * np.einsum("...k,kl,...l->...", p, self.A[i], p)

    def kinetic_grad(self, p, i):
        p = np.asarray(p, dtype=float)
        if self.family == "quadratic":
            return p.copy()
        if self.family == "quartic":
            return np.sum(p * p, axis=-1, keepdims=True) * p
        return np.einsum("kl,...l->...k", self.A[i], p)

    def kinetic_hessian(self, p, i):
        p = np.asarray(p, dtype=float)
        eye = np.eye(self.d)
        if self.family == "quadratic":
            return np.broadcast_to(eye, p.shape + (self.d,)).copy()
        if self.family == "quartic":
            r2 = np.sum(p * p, axis=-1)[..., None, None]
            return r2 * eye + 2.0 * np.einsum("...k,...l->...kl", p, p)
        return np.broadcast_to(self.A[i], p.shape + (self.d,)).copy()

    def kinetic_dual(self, q, i):
        q = np.asarray(q, dtype=float)
        if self.family == "quadratic":
            return 0.5 * np.sum(q * q, axis=-1)
        if self.family == "quartic":
            return 0.75 * np.sqrt(np.sum(q * q, axis=-1)) ** (4.0 / 3.0)
        return 0.5 * np.einsum("...k,kl,...l->...", q, self._Ainv[i], q)

    def kinetic_dual_grad(self, q, i):
        q = np.asarray(q, dtype=float)
        if self.family == "quadratic":
            return q.copy()
        if self.family == "quartic":
            r = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(r > 0, r ** (-2.0 / 3.0), 0.0)
            return scale * q
        return np.einsum("kl,...l->...k", self._Ainv[i], q)

    # -- full H and L --------------------------------------------------------

    def hamiltonian(self, x, p, i):
        return self.kinetic(p, i) - self.potential(x, i) + self.shift

    def grad_p(self, x, p, i):
        return self.kinetic_grad(p, i)

    def grad_x(self, x, p, i):
        p = np.asarray(p, dtype=float)
        g = -self.potential.gradient(x, i)
        return np.broadcast_to(g, np.broadcast_shapes(g.shape, p.shape)).copy()

    def hessian_p(self, x, p, i):
        return self.kinetic_hessian(p, i)

    def lagrangian(self, x, q, i):
        return self.kinetic_dual(q, i) + self.potential(x, i) - self.shift

    def grad_q_lagrangian(self, x, q, i):
        return self.kinetic_dual_grad(q, i)

    def describe(self) -> dict:
        out = {"family": self.family, "d": self.d, "m": self.m, "shift": self.shift,
               "potential": self.potential.describe()}
        if self.A is not None:
            out["A"] = np.asarray(self.A).tolist()
        return out


def quadratic_spec(expression: str | Sequence[str], d: int = 1, m: int = 1, shift: float = 0.0) -> HamiltonianSpec:
    """Shortcut for H = |p|^2/2 - f(x, i) + shift with a closed-form f."""
    return HamiltonianSpec("quadratic", ExpressionPotential(expression, d=d, m=m), d=d, m=m, shift=shift)


def _prepare(spec, x, v, i, name):
    check_component(i, spec.m)
    x = check_points(x, spec.d)
    v = check_finite(np.atleast_1d(np.asarray(v, dtype=float)), name)
    if v.shape[-1] != spec.d:
        raise ValueError(f"{name} must have {spec.d} coordinates, got shape {v.shape}")
    return np.mod(x, 1.0), v


def eval_hamiltonian(spec: HamiltonianSpec, x, p, i: int) -> float:
    x, p = _prepare(spec, x, p, i, "p")
    return float(spec.hamiltonian(x, p, i))


def eval_lagrangian(spec: HamiltonianSpec, x, q, i: int) -> float:
    x, q = _prepare(spec, x, q, i, "q")
    return float(spec.lagrangian(x, q, i))


def hamiltonian_derivatives(spec: HamiltonianSpec, x, p, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (D_pH, D_xH) at a single point."""
    x, p = _prepare(spec, x, p, i, "p")
    return spec.grad_p(x, p, i), spec.grad_x(x, p, i)


def legendre_numeric(hamiltonian: Callable, x, q, i: int, p_max: float = 10.0,
                     n_grid: int = 2001, refinements: int = 4) -> float:
    """sup_p {p.q - H(x, p, i)} over the box |p_k| <= p_max by grid search.

    The grid is refined around the maximiser ``refinements`` times.  Raises
    ``LegendreError`` if the maximiser sits on the outer boundary of the box.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    d = q.shape[-1]
    n = n_grid if d == 1 else max(81, int(round(n_grid ** 0.5)) | 1)
    center = np.zeros(d)
    half = float(p_max)
    best = -np.inf
    for level in range(refinements + 1):
        axes = [np.linspace(c - half, c + half, n) for c in center]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        vals = mesh @ q - hamiltonian(np.broadcast_to(x, mesh.shape), mesh, i)
        k = int(np.argmax(vals))
        best = max(best, float(vals[k]))
        idx = np.unravel_index(k, (n,) * d)
        if level == 0 and any(j in (0, n - 1) for j in idx):
            raise LegendreError(f"Legendre maximiser touches |p| = {p_max}; increase p_max")
        center = mesh[k]
        half = 2.0 * half / (n - 1)
    return best


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------


@dataclass
class AssumptionCheck:
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class AssumptionReport:
    convexity: AssumptionCheck
    coercivity: AssumptionCheck
    growth: AssumptionCheck
    symmetry: AssumptionCheck
    p_max: float
    sample_budget: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in (self.convexity, self.coercivity, self.growth, self.symmetry))

    def as_dict(self) -> dict:
        out = {}
        for key, label in (("convexity", "A1"), ("coercivity", "A2"), ("growth", "A3"), ("symmetry", "A4")):
            chk = getattr(self, key)
            out[label] = {"name": key, "passed": chk.passed, "margin": chk.margin, "detail": chk.detail}
        out["p_max"] = self.p_max
        out["sample_budget"] = self.sample_budget
        out["passed"] = self.passed
        return out


def _fd_hessian(ham, x, p, i, step=1e-4):
    d = p.shape[-1]
    hess = np.empty(p.shape + (d,))
    eye = np.eye(d) * step
    for a in range(d):
        for b in range(d):
            hess[..., a, b] = (
                ham.hamiltonian(x, p + eye[a] + eye[b], i) - ham.hamiltonian(x, p + eye[a] - eye[b], i)
                - ham.hamiltonian(x, p - eye[a] + eye[b], i) + ham.hamiltonian(x, p - eye[a] - eye[b], i)
            ) / (4 * step * step)
    return hess


def check_assumptions(spec, c: CouplingMatrix, sample_budget: int = 1000, p_max: float = 10.0,
                      seed: int = 0) -> AssumptionReport:
    """Sampled checks of convexity, superlinear growth, D_xH growth and symmetry.

    ``spec`` may be any object with ``hamiltonian``, ``grad_p``, ``grad_x``,
    ``d`` and ``m``; an analytic ``hessian_p`` is used when present.  Failures
    are reported, never raised.
    """
    if sample_budget < 100:
        raise ValueError("sample_budget must be at least 100")
    rng = np.random.default_rng(seed)
    d, m = spec.d, spec.m
    n_pts = max(sample_budget // (2 * m), 10)

    # A1: minimum eigenvalue of the p-Hessian over random (x, p, i)
    min_eig = np.inf
    for i in range(m):
        x = rng.random((n_pts, d))
        p = rng.uniform(-p_max, p_max, (n_pts, d))
        if hasattr(spec, "hessian_p"):
            hess = spec.hessian_p(x, p, i)
        else:
            hess = _fd_hessian(spec, x, p, i)
        min_eig = min(min_eig, float(np.linalg.eigvalsh(hess).min()))
    convexity = AssumptionCheck(min_eig >= -1e-10, min_eig, "minimum sampled eigenvalue of D_pp H")

    # A2: along rays, H/|p| and H^2/(2d) + D_xH.p eventually increasing
    n_rays = max(n_pts // 16, 4)
    radii = np.linspace(p_max / 2, p_max, 17)
    worst_ratio_step = np.inf
    worst_bern_step = np.inf
    ratio_at_max = np.inf
    for i in range(m):
        x = rng.random((n_rays, d))
        u = rng.normal(size=(n_rays, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        p = radii[None, :, None] * u[:, None, :]
        xx = np.broadcast_to(x[:, None, :], p.shape)
        hval = spec.hamiltonian(xx, p, i)
        ratio = hval / radii[None, :]
        bern = hval**2 / (2 * d) + np.sum(spec.grad_x(xx, p, i) * p, axis=-1)
        worst_ratio_step = min(worst_ratio_step, float(np.diff(ratio, axis=1).min()))
        worst_bern_step = min(worst_bern_step, float(np.diff(bern, axis=1).min()))
        ratio_at_max = min(ratio_at_max, float(ratio[:, -1].min()))
    coercive = worst_ratio_step > 0 and worst_bern_step > 0
    coercivity = AssumptionCheck(
        coercive, ratio_at_max,
        f"min H/|p| at |p|={p_max}: {ratio_at_max:.4g}; min increments "
        f"{worst_ratio_step:.3g} (H/|p|), {worst_bern_step:.3g} (H^2/2d + D_xH.p)",
    )

    # A3: |D_xH| <= C (1 + |p|^2); bounded ratio on the outer shell
    inner_c = 0.0
    outer_c = 0.0
    for i in range(m):
        x = rng.random((n_pts, d))
        p = rng.uniform(-p_max, p_max, (n_pts, d))
        r2 = np.sum(p * p, axis=-1)
        ratio = np.linalg.norm(spec.grad_x(x, p, i), axis=-1) / (1 + r2)
        outer = r2 >= (p_max / 2) ** 2
        inner_c = max(inner_c, float(ratio[~outer].max(initial=0.0)))
        outer_c = max(outer_c, float(ratio[outer].max(initial=0.0)))
    c_est = max(inner_c, outer_c)
    growth = AssumptionCheck(
        bool(np.isfinite(c_est)) and outer_c <= inner_c * (1 + 1e-9) + 1e-12,
        c_est, "estimated C in |D_xH| <= C(1+|p|^2)",
    )

    if c.m != m:
        symmetry = AssumptionCheck(False, np.inf, f"coupling has {c.m} components, Hamiltonian {m}")
    else:
        asym = float(np.max(np.abs(c.c - c.c.T))) if m > 1 else 0.0
        symmetry = AssumptionCheck(asym == 0.0 and bool(np.all(c.c >= 0)), asym, "max |c_ij - c_ji|")

    return AssumptionReport(convexity, coercivity, growth, symmetry, float(p_max), int(sample_budget))

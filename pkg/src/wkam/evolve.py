"""Time marching for the regularised Cauchy problem, the ergodic solver and the adjoint.

All schemes are explicit in pseudo-time except the ergodic solver, which
solves discounted stationary problems with a semismooth Newton iteration.
Every slab produced here stores the full step history (stride 1) unless a
stride is requested; the adjoint needs every step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import CouplingMatrix, HamiltonianSpec, apply_coupling
from .grid import (
    PeriodicGrid,
    central_gradient,
    discrete_laplacian,
    dissipation_bound,
    lipschitz_constant,
    one_sided_differences,
    resolve_scheme,
    upwind_momentum,
)
from ._validation import check_grid_function


class CFLError(RuntimeError):
    """The requested step violates the stability bound of an explicit update."""


class DivergenceError(RuntimeError):
    def __init__(self, message: str, frame: int):
        super().__init__(message)
        self.frame = frame


class ConvergenceError(RuntimeError):
    pass


@dataclass
class TimeSlab:
    grid: PeriodicGrid
    times: np.ndarray
    frames: np.ndarray
    dt: float
    eps: float
    stride: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return (len(self.times) - 1) * self.stride

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class ErgodicSolution:
    lam: float
    v: np.ndarray
    residual: float
    grid: PeriodicGrid
    meta: dict = field(default_factory=dict)


@dataclass
class AdjointDensity:
    slab: TimeSlab
    x0_node: tuple
    k: int
    eps: float
    clip_total: float = 0.0
    min_preclip: float = 0.0
    max_mass_error: float = 0.0

    @property
    def frames(self) -> np.ndarray:
        return self.slab.frames

    def masses(self) -> np.ndarray:
        axes = tuple(range(1, self.frames.ndim))
        return self.frames.sum(axis=axes) * self.slab.grid.cell_volume


# ---------------------------------------------------------------------------
# Shared scheme machinery
# ---------------------------------------------------------------------------


class _Scheme:
    """Precomputed pieces of the monotone discretisation of H + Theta."""

    def __init__(self, spec, c: CouplingMatrix, grid: PeriodicGrid, scheme: str = "auto", theta: float | None = None):
        if c.m != grid.m or spec.m != grid.m:
            raise ValueError(f"component mismatch: coupling m={c.m}, Hamiltonian m={spec.m}, grid m={grid.m}")
        if spec.d != grid.d:
            raise ValueError(f"dimension mismatch: Hamiltonian d={spec.d}, grid d={grid.d}")
        self.spec = spec
        self.c = c
        self.grid = grid
        self.scheme = resolve_scheme(spec, scheme)
        self.theta = theta
        self.pot = grid.sample(spec.potential)
        self.max_rate = float(c.offdiag.sum(axis=1).max()) if c.m > 1 else 0.0

    def kinetic(self, P):
        """G_i(P) per component; ``P`` has shape (d, m, *shape)."""
        Pm = np.moveaxis(P, 0, -1)
        return np.stack([self.spec.kinetic(Pm[i], i) for i in range(self.grid.m)])

    def kinetic_grad(self, P):
        """D_pG_i(P) with shape (d, m, *shape)."""
        Pm = np.moveaxis(P, 0, -1)
        g = np.stack([self.spec.kinetic_grad(Pm[i], i) for i in range(self.grid.m)])
        return np.moveaxis(g, -1, 0)

    def flux(self, u):
        """Numerical Hamiltonian H^(x, p-, p+, i) at every node."""
        h = self.grid.h
        pm, pp = one_sided_differences(u, h)
        if self.scheme == "upwind":
            P, _ = upwind_momentum(pm, pp)
            kin = self.kinetic(P)
        else:
            kin = self.kinetic(0.5 * (pm + pp)) - 0.5 * self.theta * np.sum(pp - pm, axis=0)
        return kin - self.pot + self.spec.shift

    def max_speed(self, u) -> float:
        """Largest |dH/dp_k| seen by the flux at state ``u``."""
        pm, pp = one_sided_differences(u, self.grid.h)
        P = upwind_momentum(pm, pp)[0] if self.scheme == "upwind" else 0.5 * (pm + pp)
        return float(np.abs(self.kinetic_grad(P)).max())

    def jacobian(self, u):
        """Sparse Jacobian of u -> flux(u) + Theta u (flattened component-major)."""
        g = self.grid
        n = g.n_nodes
        pm, pp = one_sided_differences(u, g.h)
        Dm = g.backward_difference_matrices()
        Dp = g.forward_difference_matrices()
        blocks = []
        if self.scheme == "upwind":
            P, sel = upwind_momentum(pm, pp)
            G = self.kinetic_grad(P)
            for i in range(g.m):
                J = sp.csr_matrix((n, n))
                for k in range(g.d):
                    gk = G[k, i].ravel()
                    sk = sel[k, i].ravel()
                    J = J + sp.diags(gk * (sk == 1)) @ Dm[k] + sp.diags(gk * (sk == -1)) @ Dp[k]
                blocks.append(J)
        else:
            G = self.kinetic_grad(0.5 * (pm + pp))
            lap = g.laplacian_matrix()
            for i in range(g.m):
                J = -0.5 * self.theta * g.h * lap
                for k in range(g.d):
                    J = J + sp.diags(G[k, i].ravel()) @ (0.5 * (Dm[k] + Dp[k]))
                blocks.append(J)
        return sp.block_diag(blocks, format="csr") + sp.kron(self.c.generator, sp.identity(n), format="csr")


def apriori_gradient_bound(spec, grid: PeriodicGrid) -> float:
    """Radius R beyond which H(x, p, i) exceeds max |H(x, 0, i)| on sampled directions."""
    pts = grid.points.reshape(-1, grid.d)
    level = max(float(np.abs(spec.hamiltonian(pts, np.zeros_like(pts), i)).max()) for i in range(grid.m))
    angles = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    dirs = np.array([[1.0], [-1.0]]) if grid.d == 1 else np.stack([np.cos(angles), np.sin(angles)], axis=1)
    R = 0.25
    for _ in range(60):
        ok = True
        for i in range(grid.m):
            for u in dirs:
                p = np.broadcast_to(R * u, pts.shape)
                if float(spec.hamiltonian(pts, p, i).min()) < level:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return R
        R *= 1.25
    raise ConvergenceError("could not bound gradients a priori; is H coercive?")


def explicit_step_bound(eps: float, h: float, d: int, theta: float, viscosity: float, max_rate: float,
                        safety: float = 0.5) -> float:
    """dt <= eps * safety * min(h/(2 d theta), h^2/(4 d nu), 1/(2 max_i sum_j c_ij))."""
    bounds = [h / (2 * d * theta) if theta > 0 else math.inf]
    if viscosity > 0:
        bounds.append(h * h / (4 * d * viscosity))
    if max_rate > 0:
        bounds.append(1.0 / (2 * max_rate))
    out = eps * safety * min(bounds)
    if not math.isfinite(out):
        out = eps * safety
    return out


# ---------------------------------------------------------------------------
# Ergodic problem
# ---------------------------------------------------------------------------


def _newton_discounted(ops: _Scheme, alpha: float, offset: float, w0, tol: float, max_iter: int):
    """Solve alpha w + flux(w) + Theta w = offset by damped semismooth Newton."""
    g = ops.grid
    shape = (g.m,) + g.shape
    w = np.array(w0, dtype=float).reshape(shape)
    eye = sp.identity(g.m * g.n_nodes, format="csr")

    def residual(u):
        return alpha * u + ops.flux(u) + apply_coupling(ops.c, u) - offset

    F = residual(w)
    norm = float(np.abs(F).max())
    for it in range(max_iter):
        if norm <= tol:
            return w, norm, it
        J = ops.jacobian(w) + alpha * eye
        step = spla.spsolve(J.tocsc(), -F.ravel()).reshape(shape)
        t = 1.0
        while True:
            trial = w + t * step
            Ft = residual(trial)
            nt = float(np.abs(Ft).max())
            if nt <= (1 - 1e-4 * t) * norm or t < 1e-6:
                break
            t *= 0.5
        if nt >= norm and t < 1e-6:
            break
        w, F, norm = trial, Ft, nt
    if norm <= tol:
        return w, norm, max_iter
    raise ConvergenceError(f"discounted Newton stalled at residual {norm:.3e} (alpha={alpha:g})")


def _long_time_lambda(ops: _Scheme, T: float, safety: float = 0.5) -> float:
    """-(mean u(T) - mean u(T/2)) / (T/2) for u_t + flux(u) + Theta u = 0, u(0) = 0."""
    g = ops.grid
    theta = ops.theta if ops.theta else 1.0
    dt = explicit_step_bound(1.0, g.h, g.d, theta, 0.0, ops.max_rate, safety)
    n = int(math.ceil(T / dt))
    dt = T / n
    u = g.zeros()
    half = None
    for step in range(n):
        u = u - dt * (ops.flux(u) + apply_coupling(ops.c, u))
        if step + 1 == n // 2:
            half = (step + 1) * dt, float(u.mean())
    t_half, m_half = half
    return -(float(u.mean()) - m_half) / (T - t_half)


def solve_ergodic(spec: HamiltonianSpec, c: CouplingMatrix, grid: PeriodicGrid, tolerance: float = 1e-9,
                  alphas=(1e-1, 1e-2, 1e-3), polish_alphas=(1e-5, 1e-7, 1e-9), scheme: str = "auto",
                  max_iter: int = 100, cross_check_time: float | None = None) -> ErgodicSolution:
    """Ergodic pair (lambda, v) of the discrete weakly coupled system.

    Discounted problems alpha v + H^ + Theta v = 0 are solved along ``alphas``
    (Richardson extrapolation of -alpha mean(v_alpha) gives a first lambda),
    then continued down ``polish_alphas``; the returned lambda and v come from
    the smallest discount.  With ``cross_check_time`` the long-time average of
    the undiscounted evolution is compared against lambda.
    """
    if grid.d != spec.d or grid.m != spec.m:
        raise ValueError("grid does not match the Hamiltonian")
    ops = _Scheme(spec, c, grid, scheme)
    R = apriori_gradient_bound(spec, grid)
    ops.theta = dissipation_bound(spec, grid, R)

    for _attempt in range(4):
        w = grid.zeros()
        mu = 0.0
        lam_alpha = []
        iters = []
        for alpha in tuple(alphas) + tuple(polish_alphas):
            w, res, it = _newton_discounted(ops, alpha, mu, w, tolerance * 0.1, max_iter)
            iters.append(it)
            lam = mu - alpha * float(w.mean())
            lam_alpha.append(lam)
            # recentre: v_alpha = w - mu/alpha keeps |w| of order one
            w = w - w.mean()
            mu = lam
        speed = ops.max_speed(w)
        if ops.scheme == "upwind" or speed <= ops.theta:
            break
        ops.theta = max(2 * ops.theta, dissipation_bound(spec, grid, lipschitz_constant(w, grid.h) + 1))
    n_lad = len(alphas)
    if n_lad >= 2:
        a1, a2 = alphas[n_lad - 2], alphas[n_lad - 1]
        l1, l2 = lam_alpha[n_lad - 2], lam_alpha[n_lad - 1]
        lam_rich = (a1 * l2 - a2 * l1) / (a1 - a2)
    else:
        lam_rich = lam_alpha[0]

    v = w - w.mean()
    lam = lam_alpha[-1]
    residual = float(np.abs(ops.flux(v) + apply_coupling(c, v) - lam).max())
    theta_cfl = max(ops.theta, dissipation_bound(spec, grid, lipschitz_constant(v, grid.h) + 1))
    meta = {
        "scheme": ops.scheme,
        "theta": theta_cfl,
        "alphas": list(alphas) + list(polish_alphas),
        "lambda_per_alpha": lam_alpha,
        "lambda_extrapolated": lam_rich,
        "newton_iterations": iters,
        "tolerance": tolerance,
    }
    if cross_check_time:
        ops_cc = _Scheme(spec, c, grid, ops.scheme, theta=theta_cfl)
        lam_cc = _long_time_lambda(ops_cc, cross_check_time)
        meta["lambda_long_time"] = lam_cc
        meta["cross_check_disagreement"] = abs(lam_cc - lam)
        meta["cross_check_flagged"] = abs(lam_cc - lam) > 10 * tolerance
    if residual > max(tolerance, 1e3 * polish_alphas[-1] if polish_alphas else tolerance):
        warnings.warn(f"ergodic residual {residual:.2e} above tolerance {tolerance:.1e}", RuntimeWarning, stacklevel=2)
    return ErgodicSolution(lam, v, residual, grid, meta)


def normalize_spec(spec: HamiltonianSpec, lam: float) -> HamiltonianSpec:
    """Shift H down by ``lam`` so the ergodic constant of the result is zero."""
    if not math.isfinite(lam):
        raise ValueError("ergodic constant must be finite")
    if lam == 0:
        return spec
    return spec.with_shift(spec.shift - lam)


# ---------------------------------------------------------------------------
# Regularised Cauchy problem
# ---------------------------------------------------------------------------


def solve_cauchy_regularized(spec, c: CouplingMatrix, eps: float, v_init, grid: PeriodicGrid,
                             scheme: str = "auto", safety: float = 0.5, stride: int = 1,
                             theta: float | None = None, viscosity: float | None = None) -> TimeSlab:
    """March eps u_t + H^(u) + Theta u = eps^4 Lap u from u(0) = v_init over t in [0, 1].

    ``v_init`` should already be mollified by the caller.  ``viscosity``
    overrides the eps^4 coefficient (tests only).
    """
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    u = check_grid_function(v_init, grid, "v_init").copy()
    nu = eps**4 if viscosity is None else float(viscosity)
    if theta is None:
        theta = dissipation_bound(spec, grid, lipschitz_constant(u, grid.h) + 1.0)
    ops = _Scheme(spec, c, grid, scheme, theta=theta)
    dt_max = explicit_step_bound(eps, grid.h, grid.d, theta, nu, ops.max_rate, safety)
    n_steps = int(math.ceil(1.0 / dt_max))
    dt = 1.0 / n_steps
    h = grid.h
    frames = [u.copy()]
    max_speed = 0.0
    for n in range(n_steps):
        speed = ops.max_speed(u)
        max_speed = max(max_speed, speed)
        if speed > theta * (1 + 1e-12):
            raise CFLError(f"step {n}: characteristic speed {speed:.4g} exceeds theta {theta:.4g}")
        u = u - (dt / eps) * (ops.flux(u) + apply_coupling(c, u) - nu * discrete_laplacian(u, h))
        if not np.all(np.isfinite(u)):
            raise DivergenceError(f"non-finite state at step {n + 1}", n + 1)
        if (n + 1) % stride == 0:
            frames.append(u.copy())
    times = np.arange(len(frames)) * dt * stride
    meta = {"theta": theta, "dt": dt, "scheme": ops.scheme, "viscosity": nu, "safety": safety,
            "n_steps": n_steps, "max_speed": max_speed}
    return TimeSlab(grid, times, np.array(frames), dt, eps, stride, meta)


# ---------------------------------------------------------------------------
# Linearised operator and its adjoint
# ---------------------------------------------------------------------------


def drift_field(spec, u, grid: PeriodicGrid) -> np.ndarray:
    """b = D_pH(x, D_h u, i) with the central gradient; shape (d, m, *shape)."""
    grad = np.moveaxis(central_gradient(u, grid.h), 0, -1)
    b = np.stack([spec.kinetic_grad(grad[i], i) for i in range(grid.m)])
    return np.moveaxis(b, -1, 0)


def linearized_operator(b, w, c: CouplingMatrix, h: float, nu: float) -> np.ndarray:
    """M w = b . D_up w + Theta w - nu Lap w, drift split b+ D- + b- D+."""
    pm, pp = one_sided_differences(w, h)
    transport = np.sum(np.maximum(b, 0) * pm + np.minimum(b, 0) * pp, axis=0)
    return transport + apply_coupling(c, w) - nu * discrete_laplacian(w, h)


def linearized_operator_transpose(b, s, c: CouplingMatrix, h: float, nu: float) -> np.ndarray:
    """Exact transpose of ``linearized_operator`` (with respect to the plain dot product)."""
    out = np.zeros_like(s)
    bp = np.maximum(b, 0)
    bm = np.minimum(b, 0)
    for k in range(b.shape[0]):
        a = k + 1
        t = bp[k] * s
        out += (t - np.roll(t, -1, axis=a)) / h
        t = bm[k] * s
        out += (np.roll(t, 1, axis=a) - t) / h
    out += np.tensordot(c.generator.T, s, axes=(1, 0))
    out -= nu * discrete_laplacian(s, h)
    return out


def _check_slab_steps(slab: TimeSlab):
    if slab.stride != 1:
        raise ValueError("adjoint construction needs a slab stored at every step (stride 1)")


def solve_adjoint(spec, c: CouplingMatrix, eps: float, u2: TimeSlab, x0_node, k: int,
                  viscosity: float | None = None) -> AdjointDensity:
    """Backward march of the transpose of the linearised forward update.

    The forward update is w <- w - (dt/eps) M^n w with M^n built from u2 at
    step n; sigma^n = (I - (dt/eps) M^n)^T sigma^{n+1}, starting from a unit
    mass at (x0_node, k).
    """
    _check_slab_steps(u2)
    grid = u2.grid
    if not 0 <= k < grid.m:
        raise IndexError(f"component {k} outside 0..{grid.m - 1}")
    x0_node = tuple(int(j) % grid.N for j in np.atleast_1d(x0_node))
    if len(x0_node) != grid.d:
        raise ValueError(f"x0_node must have {grid.d} indices")
    nu = eps**4 if viscosity is None else float(viscosity)
    h, dt, vol = grid.h, u2.dt, grid.cell_volume
    max_rate = float(c.offdiag.sum(axis=1).max()) if c.m > 1 else 0.0
    n_steps = u2.n_steps

    sigma = grid.zeros()
    sigma[(k,) + x0_node] = 1.0 / vol
    frames = np.empty((n_steps + 1,) + sigma.shape)
    frames[n_steps] = sigma
    clip_total = 0.0
    min_pre = 0.0
    max_mass_err = 0.0
    for n in range(n_steps - 1, -1, -1):
        b = drift_field(spec, u2.frames[n], grid)
        load = (dt / eps) * (np.sum(np.abs(b), axis=0) / h + 2 * grid.d * nu / h**2 + max_rate)
        if load.max() > 1.0:
            raise CFLError(f"adjoint step {n}: explicit update not positive (load {load.max():.3f} > 1)")
        sigma = sigma - (dt / eps) * linearized_operator_transpose(b, sigma, c, h, nu)
        smin = float(sigma.min())
        min_pre = min(min_pre, smin)
        if smin < 0:
            if smin < -1e-12:
                raise CFLError(f"adjoint step {n}: negative density {smin:.3e}")
            clip_total += float(-sigma[sigma < 0].sum()) * vol
            sigma = np.maximum(sigma, 0.0)
            sigma /= sigma.sum() * vol
        err = abs(float(sigma.sum()) * vol - 1.0)
        max_mass_err = max(max_mass_err, err)
        if err > 1e-10:
            raise DivergenceError(f"adjoint mass drift {err:.3e} at step {n}", n)
        frames[n] = sigma
    slab = TimeSlab(grid, u2.times.copy(), frames, dt, eps, 1, {"viscosity": nu, "x0_node": x0_node, "k": k})
    return AdjointDensity(slab, x0_node, k, eps, clip_total, min_pre, max_mass_err)


def forward_linearized(spec, c: CouplingMatrix, eps: float, u2: TimeSlab, w0,
                       viscosity: float | None = None) -> np.ndarray:
    """Evolve w by the linearised forward update; returns every step."""
    _check_slab_steps(u2)
    grid = u2.grid
    nu = eps**4 if viscosity is None else float(viscosity)
    w = check_grid_function(w0, grid, "w0").copy()
    out = [w.copy()]
    for n in range(u2.n_steps):
        b = drift_field(spec, u2.frames[n], grid)
        w = w - (u2.dt / eps) * linearized_operator(b, w, c, grid.h, nu)
        out.append(w.copy())
    return np.array(out)


def pairing_history(w_steps, sigma: AdjointDensity) -> np.ndarray:
    """sum_{x,i} w^n sigma^n h^d for every step n."""
    axes = tuple(range(1, w_steps.ndim))
    return np.sum(w_steps * sigma.frames, axis=axes) * sigma.slab.grid.cell_volume


def convexity_defect_field(spec, c: CouplingMatrix, u1: TimeSlab, u2: TimeSlab, eps: float) -> np.ndarray:
    """E^n = eps d_t(u1-u2) + b.D_up(u1-u2) + Theta(u1-u2) - eps^4 Lap(u1-u2), n = 0..steps-1."""
    _check_slab_steps(u1)
    _check_slab_steps(u2)
    if u1.frames.shape != u2.frames.shape or u1.dt != u2.dt:
        raise ValueError("slabs must share grid, steps and dt")
    grid = u2.grid
    nu = u2.meta.get("viscosity", eps**4)
    du = u1.frames - u2.frames
    out = np.empty_like(du[:-1])
    for n in range(u2.n_steps):
        b = drift_field(spec, u2.frames[n], grid)
        out[n] = eps * (du[n + 1] - du[n]) / u2.dt + linearized_operator(b, du[n], c, grid.h, nu)
    return out


def convexity_defect(spec, c: CouplingMatrix, u1: TimeSlab, u2: TimeSlab, eps: float) -> float:
    """Largest value of the convexity defect over steps, nodes and components."""
    return float(convexity_defect_field(spec, c, u1, u2, eps).max())

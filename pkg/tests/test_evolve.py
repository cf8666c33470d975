import warnings

import numpy as np
import pytest

from wkam.core import CouplingMatrix, ExpressionPotential, quadratic_spec
from wkam.evolve import (
    CFLError,
    DivergenceError,
    TimeSlab,
    convexity_defect,
    convexity_defect_field,
    forward_linearized,
    linearized_operator,
    linearized_operator_transpose,
    normalize_spec,
    pairing_history,
    solve_adjoint,
    solve_cauchy_regularized,
    solve_ergodic,
)
from wkam.grid import PeriodicGrid, mollify
from wkam.verify import eikonal_solutions

from conftest import ConcaveSpec

NO_COUPLING = CouplingMatrix(np.zeros((1, 1)))


def flat(m=1):
    return quadratic_spec("0", 1, m)


class TestCauchy:
    def test_zero_is_fixed(self):
        g = PeriodicGrid(1, 16, 2)
        slab = solve_cauchy_regularized(flat(2), CouplingMatrix.uniform(2), 0.5, g.zeros(), g)
        assert np.all(slab.frames == 0.0)
        assert slab.times[0] == 0.0 and slab.times[-1] == pytest.approx(1.0)

    def test_constant_is_fixed(self):
        g = PeriodicGrid(1, 16, 2)
        slab = solve_cauchy_regularized(flat(2), CouplingMatrix.uniform(2), 0.5, np.full((2, 16), 2.5), g)
        assert np.all(slab.frames == 2.5)

    def test_uniform_step_and_stride(self):
        g = PeriodicGrid(1, 16, 1)
        v = np.sin(2 * np.pi * g.points[..., 0])[None]
        slab = solve_cauchy_regularized(quadratic_spec("0"), NO_COUPLING, 0.5, v, g, stride=4)
        assert slab.n_steps * slab.dt == pytest.approx(1.0)
        np.testing.assert_allclose(np.diff(slab.times), 4 * slab.dt)

    def test_step_respects_stability_bound(self, single_well, c2, grid64):
        v = solve_ergodic(single_well, c2, grid64).v
        eps = 0.2
        slab = solve_cauchy_regularized(single_well, c2, eps, v, grid64)
        th = slab.meta["theta"]
        bound = eps * 0.5 * min(grid64.h / (2 * th), grid64.h**2 / (4 * eps**4), 1 / 2)
        assert slab.dt <= bound

    def test_small_theta_is_a_cfl_violation(self):
        g = PeriodicGrid(1, 32)
        v = np.sin(2 * np.pi * g.points[..., 0])[None]
        with pytest.raises(CFLError):
            solve_cauchy_regularized(quadratic_spec("0"), NO_COUPLING, 0.5, v, g, theta=0.1)

    def test_unstable_step_aborts(self):
        g = PeriodicGrid(1, 32)
        v = 0.3 * np.sin(6 * np.pi * g.points[..., 0])[None]
        with pytest.raises((DivergenceError, CFLError)):
            solve_cauchy_regularized(quadratic_spec("0"), NO_COUPLING, 1.0, v, g, safety=40.0)

    def test_eps_range(self):
        g = PeriodicGrid(1, 16)
        with pytest.raises(ValueError):
            solve_cauchy_regularized(flat(), NO_COUPLING, 1.5, g.zeros(), g)

    def test_approaches_stationary_solution(self, single_well, c2, grid64):
        v = solve_ergodic(single_well, c2, grid64).v
        dist = []
        for eps in (0.2, 0.1, 0.05):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                v0 = mollify(v, grid64, eps**4)
            slab = solve_cauchy_regularized(single_well, c2, eps, v0, grid64)
            dist.append(float(np.abs(slab.frames - v).max()))
        assert dist[0] > dist[1] > dist[2]


class TestErgodic:
    def test_single_well_constant_is_zero(self, single_well, c2, grid64):
        sol = solve_ergodic(single_well, c2, grid64)
        assert abs(sol.lam) <= 0.02
        assert sol.residual <= 1e-8
        assert abs(sol.v.sum()) <= 1e-9

    def test_shift_invariance(self, single_well, c2, grid64):
        a = solve_ergodic(single_well, c2, grid64)
        b = solve_ergodic(single_well.with_shift(0.7), c2, grid64)
        assert b.meta["lambda_extrapolated"] - a.meta["lambda_extrapolated"] == pytest.approx(0.7, abs=1e-8)
        assert b.lam - a.lam == pytest.approx(0.7, abs=1e-8)

    def test_single_equation_oracle(self):
        # one equation: lambda = -min f = -1 for f = 2 + sin(2 pi x)
        sol = solve_ergodic(quadratic_spec("2+sin(2*pi*x)"), NO_COUPLING, PeriodicGrid(1, 512, 1))
        assert abs(sol.lam + 1) <= 0.02

    def test_cross_check_recorded(self, single_well, c2):
        sol = solve_ergodic(single_well, c2, PeriodicGrid(1, 32, 2), cross_check_time=4.0)
        assert abs(sol.meta["lambda_long_time"] - sol.lam) < 1e-3
        assert "cross_check_flagged" in sol.meta

    def test_two_dimensional(self):
        spec = quadratic_spec("sin(pi*x)**2*sin(pi*y)**2", 2, 1)
        sol = solve_ergodic(spec, NO_COUPLING, PeriodicGrid(2, 16, 1))
        assert abs(sol.lam) <= 0.02

    def test_anisotropic_uses_lax_friedrichs(self):
        from wkam.core import HamiltonianSpec

        spec = HamiltonianSpec("anisotropic", ExpressionPotential("1+sin(pi*x)**2*sin(pi*y)**2", 2, 1), 2, 1,
                               A=np.array([[1.0, 0.4], [0.4, 1.0]]))
        errs = []
        for N in (8, 16, 32):
            sol = solve_ergodic(spec, NO_COUPLING, PeriodicGrid(2, N, 1))
            assert sol.meta["scheme"] == "lax-friedrichs"
            errs.append(abs(sol.lam + 1))
        # the global dissipation carries an O(theta h) bias; it must shrink under refinement
        assert errs[0] > errs[1] > errs[2]


class TestNormalize:
    def test_zero_is_identity(self, single_well):
        assert normalize_spec(single_well, 0.0) is single_well

    def test_shifted_family(self, c2, grid64):
        spec = quadratic_spec("sin(pi*x)**2+1", 1, 2)
        lam = solve_ergodic(spec, c2, grid64).lam
        assert abs(lam + 1) <= 0.02
        again = solve_ergodic(normalize_spec(spec, lam), c2, grid64).lam
        assert abs(again) <= 0.02

    def test_idempotent(self, c2, grid64):
        spec = quadratic_spec("sin(pi*x)**2+1", 1, 2)
        once = normalize_spec(spec, solve_ergodic(spec, c2, grid64).lam)
        twice = normalize_spec(once, solve_ergodic(once, c2, grid64).lam)
        assert twice.shift == pytest.approx(once.shift, abs=1e-8)

    def test_non_finite(self, single_well):
        with pytest.raises(ValueError):
            normalize_spec(single_well, float("nan"))


def _flat_slab(g, eps, value=0.0):
    return solve_cauchy_regularized(flat(g.m), CouplingMatrix.uniform(g.m) if g.m > 1 else NO_COUPLING, eps,
                                    np.full((g.m,) + g.shape, value), g)


class TestAdjoint:
    def test_heat_kernel(self):
        g = PeriodicGrid(1, 32, 1)
        slab = _flat_slab(g, 0.5, 1.0)
        sig = solve_adjoint(flat(), NO_COUPLING, 0.5, slab, (16,), 0)
        np.testing.assert_allclose(sig.masses(), 1.0, atol=1e-12)
        assert sig.frames.min() >= 0.0
        peaks = sig.frames.reshape(len(sig.frames), -1).max(axis=1)
        assert np.all(np.diff(peaks) >= -1e-12)  # peak grows toward the terminal time
        assert peaks[0] < peaks[-1]

    def test_two_state_chain(self):
        # no drift, no diffusion: M1 - M2 contracts by (1 - 2 dt/eps) per backward step
        g = PeriodicGrid(1, 16, 2)
        eps = 0.5
        slab = _flat_slab(g, eps)
        sig = solve_adjoint(flat(2), CouplingMatrix.uniform(2), eps, slab, (3,), 0, viscosity=0.0)
        steps = slab.n_steps - np.arange(slab.n_steps + 1)
        oracle = 0.5 + 0.5 * (1 - 2 * slab.dt / eps) ** steps
        m1 = sig.frames[:, 0].sum(axis=1) * g.h
        np.testing.assert_allclose(m1, oracle, atol=1e-13)
        assert np.all(np.diff(m1) >= 0)

    def test_pairing_conserved(self, single_well, c2):
        g = PeriodicGrid(1, 32, 2)
        v = solve_ergodic(single_well, c2, g).v
        slab = solve_cauchy_regularized(single_well, c2, 0.2, v, g)
        sig = solve_adjoint(single_well, c2, 0.2, slab, (5,), 1)
        w0 = np.random.default_rng(0).uniform(-1, 1, (2, 32))
        pair = pairing_history(forward_linearized(single_well, c2, 0.2, slab, w0), sig)
        assert np.abs(pair - pair[0]).max() <= 1e-12
        assert pair[-1] == pytest.approx(forward_linearized(single_well, c2, 0.2, slab, w0)[-1][1, 5])

    def test_mass_and_sign_on_single_well(self, single_well, c2, grid64):
        v = solve_ergodic(single_well, c2, grid64).v
        slab = solve_cauchy_regularized(single_well, c2, 0.1, v, grid64)
        sig = solve_adjoint(single_well, c2, 0.1, slab, (10,), 0)
        assert sig.max_mass_error <= 1e-10
        assert sig.min_preclip >= -1e-12
        assert sig.clip_total == 0.0

    def test_transpose_identity(self):
        rng = np.random.default_rng(2)
        c = CouplingMatrix(np.array([[0, 1.0, 0.3], [1.0, 0, 2.0], [0.3, 2.0, 0]]))
        b = rng.normal(size=(2, 3, 8, 8))
        w, s = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
        lhs = np.sum(linearized_operator(b, w, c, 0.125, 0.01) * s)
        rhs = np.sum(w * linearized_operator_transpose(b, s, c, 0.125, 0.01))
        assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_cfl_violation(self):
        g = PeriodicGrid(1, 16, 1)
        slab = _flat_slab(g, 0.5)
        bad = TimeSlab(g, np.array([0.0, 1.0]), slab.frames[:2], 1.0, 0.5)
        with pytest.raises(CFLError):
            solve_adjoint(flat(), NO_COUPLING, 0.5, bad, (0,), 0)

    def test_bad_source(self):
        g = PeriodicGrid(1, 16, 1)
        slab = _flat_slab(g, 0.5)
        with pytest.raises(IndexError):
            solve_adjoint(flat(), NO_COUPLING, 0.5, slab, (0,), 1)

    def test_needs_every_step(self):
        g = PeriodicGrid(1, 16, 1)
        slab = solve_cauchy_regularized(flat(), NO_COUPLING, 0.5, g.zeros(), g, stride=2)
        with pytest.raises(ValueError):
            solve_adjoint(flat(), NO_COUPLING, 0.5, slab, (0,), 0)


class TestConvexityDefect:
    def test_identical_slabs(self, single_well, c2):
        g = PeriodicGrid(1, 32, 2)
        v = solve_ergodic(single_well, c2, g).v
        slab = solve_cauchy_regularized(single_well, c2, 0.2, v, g)
        assert convexity_defect(single_well, c2, slab, slab, 0.2) == 0.0

    def test_concave_family_is_detected(self):
        spec = ConcaveSpec("quadratic", ExpressionPotential("0"), 1, 1)
        g = PeriodicGrid(1, 32, 1)
        u1 = solve_cauchy_regularized(spec, NO_COUPLING, 0.5, 0.1 * np.sin(2 * np.pi * g.points[..., 0])[None], g)
        u2 = solve_cauchy_regularized(spec, NO_COUPLING, 0.5, g.zeros(), g, theta=u1.meta["theta"])
        val = convexity_defect(spec, NO_COUPLING, u1, u2, 0.5)
        assert 0.05 < val < 10

    def test_defect_halves_with_h(self, double_well, c2):
        eps = 0.1
        vals = []
        for N in (64, 128):
            g = PeriodicGrid(1, N, 2)
            v1 = eikonal_solutions(double_well.potential, [0.0, 0.5], g)
            v2 = eikonal_solutions(double_well.potential, [0.0], g)
            u1 = solve_cauchy_regularized(double_well, c2, eps, v1, g)
            u2 = solve_cauchy_regularized(double_well, c2, eps, v2, g, theta=u1.meta["theta"])
            vals.append(convexity_defect(double_well, c2, u1, u2, eps))
        assert vals[0] <= 2.0 * (1 / 64)
        assert 0.35 <= vals[1] / vals[0] <= 0.65

    def test_mismatched_slabs(self, single_well, c2):
        a = _flat_slab(PeriodicGrid(1, 16, 2), 0.5)
        b = _flat_slab(PeriodicGrid(1, 32, 2), 0.5)
        with pytest.raises(ValueError):
            convexity_defect_field(single_well, c2, a, b, 0.5)

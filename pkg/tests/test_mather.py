import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from wkam.core import CouplingMatrix, quadratic_spec
from wkam.evolve import TimeSlab, AdjointDensity, solve_adjoint, solve_cauchy_regularized, solve_ergodic
from wkam.grid import PeriodicGrid
from wkam.mather import (
    DiscreteMeasure,
    LPError,
    TruncationError,
    VelocityGrid,
    action,
    assemble_lp,
    holonomy_matrix,
    holonomy_residual,
    lagrangian_table,
    measure_from_adjoint,
    sample_optimal_face,
    solve_mather_lp,
    uniqueness_set,
)
from wkam.verify import example_measure

VG = VelocityGrid(3.0, 17, 1)


class TestVelocityGrid:
    def test_zero_is_a_node(self):
        assert VG.points[VG.zero_index, 0] == 0.0
        assert VG.hq == pytest.approx(0.375)

    def test_even_count_rejected(self):
        with pytest.raises(ValueError):
            VelocityGrid(3.0, 16)

    def test_snap_outside_box(self):
        with pytest.raises(TruncationError):
            VG.snap(np.array([[3.5]]))

    @settings(max_examples=60, deadline=None)
    @given(q=st.floats(-3, 3))
    def test_snap_is_nearest(self, q):
        k = int(VG.snap(np.array([[q]]))[0])
        assert abs(VG.points[k, 0] - q) <= VG.hq / 2 + 1e-12

    def test_2d_snap(self):
        vg = VelocityGrid(1.0, 5, 2)
        k = int(vg.snap(np.array([[0.0, 0.0]]))[0])
        assert k == vg.zero_index
        np.testing.assert_allclose(vg.points[int(vg.snap(np.array([[0.49, -1.0]]))[0])], [0.5, -1.0])


class TestMeasure:
    def test_mass_check(self, grid64):
        w = np.zeros((2, 64, 17))
        w[0, 0, 8] = 0.5
        with pytest.raises(ValueError):
            DiscreteMeasure(grid64, VG, w)

    def test_negative_weight(self, grid64):
        w = np.zeros((2, 64, 17))
        w[0, 0, 8] = 1.5
        w[1, 0, 8] = -0.5
        with pytest.raises(ValueError):
            DiscreteMeasure(grid64, VG, w)

    def test_marginals(self, grid64):
        mu = example_measure(grid64, VG, (3,))
        assert mu.support_size == 2
        np.testing.assert_allclose(mu.component_masses(), [0.5, 0.5])
        assert mu.x_marginal()[3] == 1.0
        assert mu.q_marginal()[VG.zero_index] == 1.0


class TestHolonomy:
    def test_example_measure_is_holonomic(self, grid64, c2, single_well):
        mu = example_measure(grid64, VG, (0,), single_well.potential)
        assert holonomy_residual(mu, single_well, c2) <= 1e-12

    def test_nonuniform_weights(self, grid64, c2, single_well):
        mu = example_measure(grid64, VG, (0,), single_well.potential, weights=[0.75, 0.25])
        assert holonomy_residual(mu, single_well, c2) == pytest.approx(0.5, abs=1e-12)

    def test_uniform_at_rest_zero_potential(self, grid64, c2):
        w = np.zeros((2, 64, 17))
        w[:, :, VG.zero_index] = 1.0 / 128
        mu = DiscreteMeasure(grid64, VG, w)
        assert holonomy_residual(mu, quadratic_spec("0", 1, 2), c2) <= 1e-12

    def test_uniform_in_space_moving_measure_is_holonomic(self, c2):
        # translation invariance: a constant-velocity flow spread over the torus
        g = PeriodicGrid(1, 16, 2)
        w = np.zeros((2, 16, 17))
        w[:, :, VG.zero_index + 3] = 1.0 / 32
        assert holonomy_residual(DiscreteMeasure(g, VG, w), None, c2) <= 1e-12

    def test_rows_annihilate_constants(self, c2):
        # summing all test rows is the constant test function: zero for every atom
        g = PeriodicGrid(2, 8, 2)
        A = holonomy_matrix(g, VelocityGrid(1.0, 5, 2), c2)
        assert np.abs(np.asarray(A.sum(axis=0))).max() <= 1e-12

    def test_transport_rows_match_upwind_generator(self):
        g = PeriodicGrid(1, 8, 1)
        vg = VelocityGrid(2.0, 5, 1)
        A = holonomy_matrix(g, vg, CouplingMatrix(np.zeros((1, 1)))).toarray()
        rng = np.random.default_rng(0)
        phi = rng.normal(size=8)
        for node in range(8):
            for k, q in enumerate(vg.points[:, 0]):
                col = node * 5 + k
                gen = (max(q, 0) * (phi[(node + 1) % 8] - phi[node]) + min(q, 0) * (phi[node] - phi[node - 1])) / g.h
                central = q * (phi[(node + 1) % 8] - phi[node - 1]) / (2 * g.h)
                visc = 0.5 * g.h * abs(q) * (phi[(node + 1) % 8] - 2 * phi[node] + phi[node - 1]) / g.h**2
                assert A[:, col] @ phi == pytest.approx(gen)
                assert gen == pytest.approx(central + visc)


class TestLP:
    def test_assembly_sizes(self, single_well, c2):
        lp = assemble_lp(single_well, c2, PeriodicGrid(1, 32, 2), VG)
        assert lp.n_atoms == 2 * 32 * 17
        assert lp.n_test_rows == 64 and lp.A_eq.shape[0] == 65

    def test_objective_at_rest(self, single_well, c2, grid64):
        L = lagrangian_table(single_well, grid64, VG)
        assert L[0, 0, VG.zero_index] == 0.0 and L[1, 0, VG.zero_index] == 0.0

    def test_example_is_feasible(self, single_well, c2, grid64):
        lp = assemble_lp(single_well, c2, grid64, VG)
        mu = example_measure(grid64, VG, (0,))
        assert np.abs(lp.A_eq @ mu.weights.ravel() - lp.b_eq).max() <= 1e-12

    def test_atom_budget(self, single_well, c2):
        with pytest.raises(ValueError):
            assemble_lp(single_well, c2, PeriodicGrid(1, 64, 2), VG, atom_budget=1000)

    def test_single_well_minimiser(self, single_well, c2, grid64):
        mu, value = solve_mather_lp(assemble_lp(single_well, c2, grid64, VG))
        assert -1e-9 <= value <= 5 * grid64.h
        near = mu.x_marginal()[[62, 63, 0, 1, 2]].sum()
        assert near >= 0.9
        np.testing.assert_allclose(mu.component_masses(), 0.5, atol=0.05)
        assert mu.q_marginal()[VG.zero_index] >= 0.9

    def test_unnormalised_value(self, c2, grid64):
        _, value = solve_mather_lp(assemble_lp(quadratic_spec("sin(pi*x)**2+1", 1, 2), c2, grid64, VG))
        assert value == pytest.approx(1.0, abs=5 * grid64.h)
        lam = solve_ergodic(quadratic_spec("sin(pi*x)**2+1", 1, 2), c2, grid64).lam
        assert value == pytest.approx(-lam, abs=5 * grid64.h)

    def test_value_decreases_with_h(self, single_well, c2):
        vals = [solve_mather_lp(assemble_lp(quadratic_spec("sin(pi*(x-0.01))**2", 1, 2), c2,
                                            PeriodicGrid(1, N, 2), VG))[1] for N in (32, 128)]
        assert vals[1] < vals[0]
        assert min(vals) >= -1e-9

    def test_builtin_simplex_agrees(self, single_well, c2):
        lp = assemble_lp(quadratic_spec("0.5+sin(pi*x)**2", 1, 2), c2, PeriodicGrid(1, 16, 2), VelocityGrid(2.0, 5))
        _, a = solve_mather_lp(lp, "simplex")
        _, b = solve_mather_lp(lp, "highs-ds")
        assert a == pytest.approx(b, abs=1e-9)

    def test_infeasible_reported(self, single_well, c2):
        lp = assemble_lp(single_well, c2, PeriodicGrid(1, 16, 2), VelocityGrid(2.0, 5))
        lp.b_eq = lp.b_eq.copy()
        lp.b_eq[0] = 5.0
        with pytest.raises(LPError):
            solve_mather_lp(lp)

    def test_nonnegative_action_on_feasible_set(self, single_well, c2):
        # random feasible points: convex combinations of optimal-face samples and the example
        g = PeriodicGrid(1, 32, 2)
        lp = assemble_lp(single_well, c2, g, VelocityGrid(3.0, 9))
        mu, value = solve_mather_lp(lp)
        for other in sample_optimal_face(lp, value, 4, seed=1):
            assert action(other, single_well) >= -1e-9
            # face samples inherit the solver's primal feasibility tolerance
            assert holonomy_residual(other, single_well, c2) <= 1e-5


class TestUniquenessSet:
    def test_single_measure_dilated(self, grid64):
        M = uniqueness_set([example_measure(grid64, VG, (10,))], 1e-6)
        assert M == {((k,), i) for k in (9, 10, 11) for i in (0, 1)}

    def test_no_dilation(self, grid64):
        assert uniqueness_set([example_measure(grid64, VG, (10,))], 1e-6, dilate=False) == {((10,), 0), ((10,), 1)}

    def test_threshold_too_high(self, grid64):
        assert uniqueness_set([example_measure(grid64, VG, (10,))], 0.9) == set()

    def test_empty_list(self):
        with pytest.raises(ValueError):
            uniqueness_set([])

    def test_single_well(self, single_well, c2, grid64):
        lp = assemble_lp(single_well, c2, grid64, VG)
        mu, value = solve_mather_lp(lp)
        M = uniqueness_set([mu] + sample_optimal_face(lp, value, 8, seed=0))
        nodes = {n[0] for n, _ in M}
        assert 0 in nodes and nodes <= {62, 63, 0, 1, 2}

    def test_double_well_face_sampling(self, double_well, c2, grid64):
        lp = assemble_lp(double_well, c2, grid64, VG)
        mu, value = solve_mather_lp(lp)
        M = uniqueness_set([mu] + sample_optimal_face(lp, value, 32, seed=0))
        for i in (0, 1):
            assert ((0,), i) in M and ((32,), i) in M

    def test_face_sampling_is_reproducible(self, double_well, c2):
        lp = assemble_lp(double_well, c2, PeriodicGrid(1, 32, 2), VG)
        _, value = solve_mather_lp(lp)
        a = sample_optimal_face(lp, value, 4, seed=7)
        b = sample_optimal_face(lp, value, 4, seed=7)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.weights, y.weights)


class TestAdjointMeasure:
    def test_flat_problem_rests(self):
        g = PeriodicGrid(1, 16, 2)
        spec = quadratic_spec("0", 1, 2)
        c = CouplingMatrix.uniform(2)
        slab = solve_cauchy_regularized(spec, c, 0.5, np.ones((2, 16)), g)
        sig = solve_adjoint(spec, c, 0.5, slab, (4,), 0)
        mu = measure_from_adjoint(spec, slab, sig, VelocityGrid(1.0, 5))
        assert mu.q_marginal()[2] == pytest.approx(1.0)
        assert action(mu, spec) == 0.0

    def test_quadratic_pushforward_is_identity(self, single_well, c2):
        g = PeriodicGrid(1, 32, 2)
        v = solve_ergodic(single_well, c2, g).v
        slab = solve_cauchy_regularized(single_well, c2, 0.2, v, g)
        sig = solve_adjoint(single_well, c2, 0.2, slab, (8,), 0)
        mu, nu = measure_from_adjoint(single_well, slab, sig, VG, return_momentum=True)
        np.testing.assert_array_equal(mu.weights, nu.weights)

    def test_single_well_adjoint_measure(self, single_well, c2, grid64):
        v = solve_ergodic(single_well, c2, grid64).v
        slab = solve_cauchy_regularized(single_well, c2, 0.1, v, grid64)
        sig = solve_adjoint(single_well, c2, 0.1, slab, (0,), 0)
        mu = measure_from_adjoint(single_well, slab, sig, VG)
        assert action(mu, single_well) <= 0.1
        assert holonomy_residual(mu, single_well, c2) <= 0.1

    def test_truncation_violation(self, single_well, c2):
        g = PeriodicGrid(1, 32, 2)
        v = solve_ergodic(single_well, c2, g).v
        slab = solve_cauchy_regularized(single_well, c2, 0.2, v, g)
        sig = solve_adjoint(single_well, c2, 0.2, slab, (8,), 0)
        with pytest.raises(TruncationError):
            measure_from_adjoint(single_well, slab, sig, VelocityGrid(0.5, 5))


def test_action_point_mass(grid64):
    w = np.zeros((2, 64, 17))
    k = int(VG.snap(np.array([[1.125]]))[0])
    w[0, 5, k] = 1.0
    assert action(DiscreteMeasure(grid64, VG, w), quadratic_spec("0", 1, 2)) == pytest.approx(1.125**2 / 2)

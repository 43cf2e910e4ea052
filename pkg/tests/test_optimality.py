"""
Unit tests for the semismooth Newton solver of the regularized optimality system.
"""

import numpy as np
import pytest

from src.models import PenaltyParams, SolverSettings
from src.optimality import (
    LineSearchFailed,
    SolverError,
    control_from_dual,
    d_inner,
    line_search,
    linearize,
    newton_apply,
    residual_F,
    solve_fixed_gamma,
    solve_newton_step,
    switching_diagnostics,
)
from src.oracle_suite import dense_newton_oracle, oracle_residual


@pytest.fixture
def dual(tiny_problem, rng):
    """Random dual trajectory with a nontrivial active structure."""
    return rng.normal(scale=0.05, size=tiny_problem.shape)


class TestResidual:
    """Test the reduced optimality residual."""

    def test_zero_target(self, zero_target_problem):
        """Test F(0) = 0 for y^d = 0."""
        F = residual_F(np.zeros(zero_target_problem.shape), zero_target_problem)
        assert not np.any(F)

    def test_matches_oracle_residual(self, tiny_problem, dual):
        """Test F against the enumeration-based residual."""
        np.testing.assert_allclose(residual_F(dual, tiny_problem), oracle_residual(tiny_problem, dual),
                                   rtol=1e-9, atol=1e-12)

    def test_linearization_fields(self, tiny_problem, dual):
        """Test shapes and the active mask of the linearization."""
        lin = linearize(dual, tiny_problem)
        M, N = tiny_problem.shape
        assert lin.derivatives.shape == (M, N, N)
        assert lin.residual_norm == pytest.approx(tiny_problem.norm(lin.F))
        np.testing.assert_array_equal(lin.active, np.diagonal(lin.derivatives, axis1=1, axis2=2) != 0.0)
        np.testing.assert_allclose(lin.u, control_from_dual(dual, tiny_problem.penalty))

    def test_shape_mismatch(self, tiny_problem):
        """Test rejection of a wrongly shaped dual."""
        with pytest.raises(ValueError, match="shape"):
            residual_F(np.zeros((3, 3)), tiny_problem)


class TestNewtonOperator:
    """Test the Newton operator and its D-weighted symmetry."""

    def test_zero_direction(self, tiny_problem, dual):
        """Test A 0 = 0."""
        lin = linearize(dual, tiny_problem)
        assert not np.any(newton_apply(lin.derivatives, np.zeros(tiny_problem.shape), tiny_problem))

    def test_symmetric_in_d_inner_product(self, tiny_problem, dual, rng):
        """Test <D v, A w> = <D w, A v>."""
        lin = linearize(dual, tiny_problem)
        D = lin.derivatives
        v, w = rng.normal(size=(2, *tiny_problem.shape))
        a = d_inner(D, v, newton_apply(D, w, tiny_problem), tiny_problem.tau)
        b = d_inner(D, w, newton_apply(D, v, tiny_problem), tiny_problem.tau)
        assert a == pytest.approx(b, rel=1e-9)

    def test_coercive_in_d_inner_product(self, tiny_problem, dual, rng):
        """Test <v, A v>_D >= <v, v>_D."""
        lin = linearize(dual, tiny_problem)
        D = lin.derivatives
        for _ in range(5):
            v = rng.normal(size=tiny_problem.shape)
            lhs = d_inner(D, v, newton_apply(D, v, tiny_problem), tiny_problem.tau)
            assert lhs >= d_inner(D, v, v, tiny_problem.tau) * (1.0 - 1e-12)


class TestNewtonStep:
    """Test the matrix-free CG solve of the Newton system."""

    def test_zero_right_hand_side(self, zero_target_problem):
        """Test dp = 0 with no CG iterations when F = 0."""
        dp, iterations = solve_newton_step(np.zeros(zero_target_problem.shape), zero_target_problem,
                                           SolverSettings())
        assert iterations == 0
        assert not np.any(dp)

    def test_matches_dense_solve(self, tiny_problem, dual, tight_settings):
        """Test the CG step against a dense direct solve."""
        dp, iterations = solve_newton_step(dual, tiny_problem, tight_settings)
        reference = dense_newton_oracle(tiny_problem, dual)
        assert iterations > 0
        np.testing.assert_allclose(dp, reference, rtol=0.0, atol=1e-8 * max(1.0, np.abs(reference).max()))

    def test_solves_newton_system(self, tiny_problem, dual, tight_settings):
        """Test A dp = -F to the CG tolerance."""
        lin = linearize(dual, tiny_problem)
        dp, _ = solve_newton_step(dual, tiny_problem, tight_settings, lin)
        residual = newton_apply(lin.derivatives, dp, tiny_problem) + lin.F
        assert tiny_problem.norm(residual) <= 1e-9 * lin.residual_norm


class TestLineSearch:
    """Test backtracking on the residual norm."""

    def test_newton_direction_accepted(self, tiny_problem, dual, tight_settings):
        """Test that a Newton direction decreases ||F||."""
        lin = linearize(dual, tiny_problem)
        dp, _ = solve_newton_step(dual, tiny_problem, tight_settings, lin)
        p_next, step, lin_next = line_search(dual, dp, tiny_problem, tight_settings, lin)
        assert step in {tight_settings.linesearch_factor**k for k in range(tight_settings.linesearch_max)}
        assert lin_next.residual_norm < lin.residual_norm
        np.testing.assert_allclose(p_next, dual + step * dp)

    def test_failure_raises(self, tiny_problem, dual):
        """Test LineSearchFailed for an ascent direction."""
        settings = SolverSettings(linesearch_max=2)
        lin = linearize(dual, tiny_problem)
        with pytest.raises(LineSearchFailed, match="backtracking"):
            line_search(dual, 1e6 * lin.F, tiny_problem, settings, lin)


class TestSolveFixedGamma:
    """Test the Newton iteration at fixed gamma."""

    def test_zero_target(self, zero_target_problem):
        """Test immediate convergence to p = 0, u = 0."""
        state, u = solve_fixed_gamma(np.zeros(zero_target_problem.shape), zero_target_problem,
                                     SolverSettings())
        assert state.converged
        assert state.iteration <= 1
        assert not np.any(u)

    def test_converges_with_decreasing_residuals(self, tiny_problem, tight_settings):
        """Test convergence, monotone residuals and the relative stopping rule."""
        state, u = solve_fixed_gamma(np.zeros(tiny_problem.shape), tiny_problem, tight_settings)
        residuals = [record.residual_norm for record in state.history]
        assert state.converged
        assert all(b < a for a, b in zip(residuals, residuals[1:]))
        assert residuals[-1] <= tight_settings.newton_tol_rel * residuals[0]
        assert state.history[-1].switched_intervals == 0
        np.testing.assert_allclose(u, control_from_dual(state.p, tiny_problem.penalty))

    def test_iteration_limit(self, tiny_problem):
        """Test that the iteration cap raises with the partial state attached."""
        settings = SolverSettings(newton_tol_rel=1e-15, newton_max_iter=1)
        with pytest.raises(SolverError) as info:
            solve_fixed_gamma(np.zeros(tiny_problem.shape), tiny_problem, settings)
        assert info.value.state is not None
        assert info.value.state.iteration <= 1


class TestSwitchingDiagnostics:
    """Test interval classification and switch-point counting."""

    params = PenaltyParams(alpha=1.0, gamma=1e-3)

    def test_perfect_switching(self):
        """Test tau_1 = M and switch points between different dominant components."""
        p = np.array([[3.0, 1.0], [3.0, 1.0], [1.0, 3.0], [1.0, 3.0], [3.0, 1.0]])
        diagnostics = switching_diagnostics(control_from_dual(p, self.params), p, self.params)
        assert diagnostics.tau == {1: 5, 2: 0}
        assert diagnostics.switch_points == 2
        assert diagnostics.perfectly_switching
        assert diagnostics.never_active == []

    def test_tie_interval(self):
        """Test that an interval with two active components breaks the count."""
        p = np.array([[3.0, 1.0], [2.0, 2.0], [1.0, 3.0]])
        diagnostics = switching_diagnostics(control_from_dual(p, self.params), p, self.params)
        assert diagnostics.tau == {1: 2, 2: 1}
        assert diagnostics.switch_points == 0
        assert not diagnostics.perfectly_switching
        np.testing.assert_array_equal(diagnostics.d, [1, 2, 1])

    def test_switch_next_to_two_active_components(self):
        """Test that a unique argmax with d=2 still counts as a side of a switch point."""
        p = np.array([[3.0, 1.0], [3.0, 2.999], [1.0, 3.0]])
        diagnostics = switching_diagnostics(control_from_dual(p, self.params), p, self.params)
        np.testing.assert_array_equal(diagnostics.d, [1, 2, 1])
        assert diagnostics.switch_points == 1

    def test_never_active(self):
        """Test 1-based reporting of components that are never used."""
        p = np.array([[3.0, 1.0, 0.5]] * 4)
        diagnostics = switching_diagnostics(control_from_dual(p, self.params), p, self.params)
        assert diagnostics.never_active == [2, 3]
        np.testing.assert_allclose(diagnostics.envelope, 3.0 / (1.0 + 1e-3))

    def test_shape_mismatch(self):
        """Test rejection of mismatched control and dual."""
        with pytest.raises(ValueError, match="shape"):
            switching_diagnostics(np.zeros((2, 2)), np.zeros((3, 2)), self.params)

"""
Full-size runs on the default discretization (N=7, M=200, mesh edge 0.1).

These take minutes; select or skip them with ``-m integration`` / ``-m "not integration"``.
"""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.cli_runner import parse_config, run_experiment
from src.heat_fem import build_problem
from src.homotopy import run_homotopy
from src.models import HomotopySchedule, PenaltyParams, SolverSettings
from src.optimality import solve_fixed_gamma, switching_diagnostics
from src.prox_core import prox_gstar, subdiff_contains

pytestmark = pytest.mark.integration

M = 200
CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


@pytest.fixture(scope="module")
def default_problem():
    return build_problem(7, alpha=1e-1)


@pytest.fixture(scope="module")
def homotopy_runs(default_problem):
    """Homotopy reports per alpha, computed once per module."""
    cache = {}

    def run(alpha):
        if alpha not in cache:
            problem = replace(default_problem, penalty=PenaltyParams(alpha=alpha, gamma=1e-2))
            report, _ = run_homotopy(problem, HomotopySchedule(), SolverSettings())
            cache[alpha] = (problem, report)
        return cache[alpha]

    return run


def _assert_switching_relation(problem, p, u, gamma):
    params = problem.penalty.with_gamma(gamma)
    for q, v in zip(p, u):
        tol = 1e-6 * max(1.0, np.abs(q).max())
        assert subdiff_contains(prox_gstar(q, params).w, v, params.alpha, tol)


def _assert_mass_balance(problem, u):
    solver = problem.solver
    injected = solver.injected_mass(u)
    np.testing.assert_allclose(solver.total_mass(solver.apply_S(u)), injected,
                               rtol=1e-8, atol=1e-12 * max(1.0, np.abs(injected).max()))


class TestAdjointConsistency:
    """Test the discrete adjoint at full size."""

    def test_random_pairs(self, default_problem, rng):
        """Test the adjoint identity on 100 random pairs."""
        solver = default_problem.solver
        for _ in range(100):
            u = rng.normal(size=solver.control_shape)
            r = rng.normal(size=solver.state_shape)
            lhs = solver.observed_inner(solver.apply_S(u), r)
            rhs = solver.control_inner(u, solver.apply_Sstar(r))
            assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs))


class TestPerfectSwitching:
    """Test switching structure for large alpha."""

    @pytest.mark.parametrize("alpha", [1e-1, 1e-2])
    def test_large_alpha(self, homotopy_runs, alpha):
        """Test tau_1 >= 0.97 M, gamma_bar <= 1e-10 and disjoint supports on d=1 intervals."""
        problem, report = homotopy_runs(alpha)
        diagnostics = switching_diagnostics(report.u, report.p, problem.penalty.with_gamma(report.last_gamma))
        assert diagnostics.tau[1] >= 0.97 * M
        assert report.last_gamma <= 1e-10

        single = report.u[diagnostics.d == 1]
        products = np.abs(single[:, :, None] * single[:, None, :])
        products[:, np.arange(7), np.arange(7)] = 0.0
        assert not np.any(products)

        _assert_switching_relation(problem, report.p, report.u, report.last_gamma)
        _assert_mass_balance(problem, report.u)

    def test_envelope_continuity(self, homotopy_runs):
        """Test that |u(t)|_1 has no jump above five times the median jump at alpha = 1e-1."""
        problem, report = homotopy_runs(1e-1)
        diagnostics = switching_diagnostics(report.u, report.p, problem.penalty.with_gamma(report.last_gamma))
        jumps = np.abs(np.diff(diagnostics.envelope))
        assert report.last_gamma <= 1e-10
        assert jumps.max() <= 5.0 * np.median(jumps)

    @pytest.mark.parametrize("alpha", [1e-1, 1e-2])
    def test_last_stages_stabilize(self, homotopy_runs, alpha):
        """Test that tau_j and ||u_gamma|| barely change across the last two stages."""
        _, report = homotopy_runs(alpha)
        previous, last = report.converged_stages[-2:]
        for j in last.tau:
            assert abs(last.tau[j] - previous.tau[j]) <= 1
        assert last.control_norm == pytest.approx(previous.control_norm, rel=1e-3)


class TestModerateAlpha:
    """Test the homotopy and result files at alpha = 1e-3."""

    def test_tau_1_nondecreasing_over_stages(self, homotopy_runs):
        """Test that once single-component intervals appear their count never drops."""
        _, report = homotopy_runs(1e-3)
        counts = [stage.tau[1] for stage in report.converged_stages]
        started = next(i for i, count in enumerate(counts) if count > 0)
        assert all(b >= a for a, b in zip(counts[started:], counts[started + 1:]))

    def test_isolated_double_activity(self, default_problem, tmp_path):
        """Test tau_2 small and positive in summary.json, equal to the diagnostics of the result."""
        config = parse_config(CONFIG_DIR / "n7_alpha1e-3.yaml", {"output_dir": str(tmp_path)})
        problem = replace(default_problem, penalty=PenaltyParams(alpha=config.alpha, gamma=1e-2))
        report, summary = run_experiment(config, problem)

        data = json.loads((tmp_path / "summary.json").read_text())
        tau = {int(j): count for j, count in data["tau"].items()}
        assert 0 < tau[2] <= 0.05 * M
        diagnostics = switching_diagnostics(report.u, report.p, problem.penalty.with_gamma(report.last_gamma))
        assert tau == diagnostics.tau == summary.tau


class TestSwitchingDegradation:
    """Test loss of switching structure for tiny alpha."""

    def test_small_alpha(self, homotopy_runs):
        """Test tau_1 < M/2, tau_2 + tau_3 > 0.4 M and early termination."""
        problem, report = homotopy_runs(1e-5)
        tau = report.last_stage.tau
        assert tau[1] < 0.5 * M
        assert tau[2] + tau[3] > 0.4 * M
        assert report.last_gamma > 1e-12
        _assert_switching_relation(problem, report.p, report.u, report.last_gamma)


class TestSuperlinearConvergence:
    """Test the local behaviour of a single semismooth Newton solve."""

    def test_single_solve(self, default_problem):
        """Test <= 8 iterations, tiny final residual, shrinking ratios and s_k = 0 at the end."""
        problem = replace(default_problem, penalty=PenaltyParams(alpha=1e-2, gamma=1e-7))
        settings = SolverSettings(newton_tol_rel=1e-10, newton_max_iter=50, cg_tol_rel=1e-12, cg_max_iter=200)
        state, u = solve_fixed_gamma(np.zeros(problem.shape), problem, settings)

        residuals = [record.residual_norm for record in state.history]
        # same order of magnitude as F_0 = 3.133e-2 on an unstructured mesh of similar size
        assert 3.133e-3 <= residuals[0] <= 3.133e-1
        assert state.iteration <= 8
        assert residuals[-1] <= 1e-10 * max(1.0, residuals[0])
        ratios = [b / a for a, b in zip(residuals, residuals[1:])]
        assert all(b < a for a, b in zip(ratios[-3:], ratios[-2:]))
        assert state.history[-1].switched_intervals == 0

        _assert_switching_relation(problem, state.p, u, 1e-7)
        _assert_mass_balance(problem, u)


class TestSwitchPointStability:
    """Test that switch-point counts barely depend on alpha."""

    def test_counts(self, homotopy_runs):
        """Test counts in [6, 18] varying by at most 5."""
        counts = []
        for alpha in (1e-1, 1e-2, 1e-3):
            problem, report = homotopy_runs(alpha)
            counts.append(report.last_stage.switch_points)
        assert all(6 <= c <= 18 for c in counts)
        assert max(counts) - min(counts) <= 5

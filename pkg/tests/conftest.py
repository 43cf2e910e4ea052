"""
Common test fixtures for the switching-control solver tests.
"""
import numpy as np
import pytest

from src.heat_fem import build_problem
from src.models import SolverSettings

# Two controls, five intervals on a 6x6-cell mesh: small enough for dense oracles
TINY = {
    "N": 2,
    "alpha": 1e-2,
    "T": 1.0,
    "time_intervals": 5,
    "mesh_edge": 0.5,
    "control_radius": 0.25,
}


@pytest.fixture
def rng():
    """Seeded generator so random cases are reproducible."""
    return np.random.default_rng(20241019)


@pytest.fixture(scope="session")
def tiny_problem():
    """Coarse N=2, M=5 problem at gamma=1e-3."""
    return build_problem(
        TINY["N"], TINY["alpha"], gamma=1e-3, T=TINY["T"], time_intervals=TINY["time_intervals"],
        mesh_edge=TINY["mesh_edge"], control_radius=TINY["control_radius"],
    )


@pytest.fixture(scope="session")
def zero_target_problem(tiny_problem):
    """Tiny problem with y^d = 0, whose solution is p = 0, u = 0."""
    return build_problem(
        TINY["N"], TINY["alpha"], gamma=1e-3, T=TINY["T"], time_intervals=TINY["time_intervals"],
        mesh_edge=TINY["mesh_edge"], control_radius=TINY["control_radius"],
        yd=np.zeros(tiny_problem.solver.state_shape),
    )


@pytest.fixture
def tight_settings():
    """Newton/CG tolerances tight enough for comparisons against dense references."""
    return SolverSettings(newton_tol_rel=1e-10, newton_max_iter=50, cg_tol_rel=1e-13, cg_max_iter=200)


@pytest.fixture
def tiny_config(tmp_path):
    """Raw configuration mapping for a tiny end-to-end run."""
    return {
        **TINY,
        "output_dir": str(tmp_path / "run"),
        "homotopy": {"gamma_start": 1e-2, "reduction_factor": 10, "gamma_min": 1e-4},
    }

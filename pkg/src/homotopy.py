"""
Continuation in the Moreau-Yosida parameter gamma.

Each stage solves the fixed-gamma optimality system warm-started from the
previous stage's dual variable; the first failing stage ends the run and the
last successful stage is returned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .heat_fem import SwitchingProblem, evaluate_objective
from .models import HomotopySchedule, SolverSettings, StageRecord
from .optimality import (
    LineSearchFailed,
    NewtonState,
    NotConverged,
    SolverError,
    solve_fixed_gamma,
    switching_diagnostics,
)

logger = logging.getLogger(__name__)


class FirstStageFailed(SolverError):
    """No solution at gamma_start; carries the (single-stage) report."""

    def __init__(self, message: str, report: "SolveReport"):
        super().__init__(message)
        self.report = report


@dataclass
class SolveReport:
    """Stage records plus the final trajectories of the last successful stage."""
    stages: List[StageRecord] = field(default_factory=list)
    p: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    last_gamma: Optional[float] = None

    @property
    def converged_stages(self) -> List[StageRecord]:
        return [s for s in self.stages if s.converged]

    @property
    def total_newton_iterations(self) -> int:
        return sum(s.newton_iterations for s in self.stages)

    @property
    def last_stage(self) -> Optional[StageRecord]:
        stages = self.converged_stages
        return stages[-1] if stages else None


def stage_record(problem: SwitchingProblem, state: NewtonState, u: np.ndarray) -> StageRecord:
    """Summarize a converged fixed-gamma solve."""
    diagnostics = switching_diagnostics(u, state.p, problem.penalty)
    return StageRecord(
        gamma=problem.penalty.gamma,
        converged=True,
        newton_iterations=state.iteration,
        last_cg_iterations=state.last_cg_iterations,
        tau=diagnostics.tau,
        switch_points=diagnostics.switch_points,
        control_norm=problem.norm(u),
        objective=evaluate_objective(problem, u, regularized=True),
        history=list(state.history),
    )


def run_homotopy(problem: SwitchingProblem, schedule: HomotopySchedule, settings: SolverSettings,
                 warm_start: bool = True) -> Tuple[SolveReport, float]:
    """Solve at gamma_start, gamma_start/f, ... until a stage fails or gamma_min is passed.

    Raises FirstStageFailed when the very first stage does not converge.
    """
    report = SolveReport()
    p = np.zeros(problem.shape)

    for gamma in schedule.gammas():
        staged = problem.with_gamma(gamma)
        start = p if warm_start else np.zeros(problem.shape)
        try:
            state, u = solve_fixed_gamma(start, staged, settings)
        except (NotConverged, LineSearchFailed) as exc:
            failure = "not_converged" if isinstance(exc, NotConverged) else "line_search_failed"
            partial = exc.state
            report.stages.append(StageRecord(
                gamma=gamma,
                converged=False,
                newton_iterations=partial.iteration if partial else 0,
                last_cg_iterations=partial.last_cg_iterations if partial else 0,
                failure=failure,
                history=list(partial.history) if partial else [],
            ))
            logger.warning("Homotopy stage failed", extra={"gamma": gamma, "reason": failure})
            if report.last_gamma is None:
                raise FirstStageFailed(f"First homotopy stage (gamma={gamma:.1e}) failed: {exc}",
                                       report) from exc
            break

        record = stage_record(staged, state, u)
        report.stages.append(record)
        report.p, report.u, report.last_gamma = state.p, u, gamma
        p = state.p
        logger.info(
            "Homotopy stage converged",
            extra={"gamma": gamma, "ssn": record.newton_iterations, "cg": record.last_cg_iterations,
                   "tau": record.tau, "switch_points": record.switch_points},
        )

    return report, report.last_gamma

"""
Semismooth Newton solver for the reduced regularized optimality system

    F(p) = p + S*(S H_gamma(p) - y^d) = 0,

where H_gamma applies the Moreau-Yosida regularized subdifferential slice by
slice. Newton steps solve (I + S* S_0 D) dp = -F(p) matrix-free with CG in the
inner product generated by the block-diagonal Newton derivative D.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .heat_fem import SwitchingProblem
from .models import NewtonRecord, PenaltyParams, SolverSettings
from .prox_core import hgamma, newton_derivative, prox_gstar

logger = logging.getLogger(__name__)


class SolverError(Exception):
    """Base class for Newton failures; carries the state reached so far."""

    def __init__(self, message: str, state: Optional["NewtonState"] = None):
        super().__init__(message)
        self.state = state


class NotConverged(SolverError):
    """Residual tolerance not reached within newton_max_iter iterations."""
    pass


class LineSearchFailed(SolverError):
    """No step in the backtracking sequence decreased the residual norm."""
    pass


@dataclass
class Linearization:
    """Everything the Newton iteration needs at one iterate p."""
    p: np.ndarray
    u: np.ndarray
    F: np.ndarray
    residual_norm: float
    derivatives: np.ndarray
    active: np.ndarray


@dataclass
class NewtonState:
    p: np.ndarray
    residual_norm: float
    iteration: int
    gamma: float
    history: List[NewtonRecord] = field(default_factory=list)
    converged: bool = False

    @property
    def last_cg_iterations(self) -> int:
        return self.history[-1].cg_iterations if self.history else 0


@dataclass
class SwitchingDiagnostics:
    """Per-interval switching structure of a control."""
    tau: Dict[int, int]
    switch_points: int
    never_active: List[int]
    d: np.ndarray
    envelope: np.ndarray

    @property
    def perfectly_switching(self) -> bool:
        return self.tau.get(1, 0) == len(self.d)


def _check_dual(p, problem: SwitchingProblem) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != problem.shape:
        raise ValueError(f"Dual trajectory has shape {p.shape}, expected {problem.shape}")
    return p


def control_from_dual(p, params: PenaltyParams) -> np.ndarray:
    """u_gamma = H_gamma(p), slice by slice."""
    p = np.asarray(p, dtype=float)
    return np.array([hgamma(q, params) for q in p])


def linearize(p, problem: SwitchingProblem) -> Linearization:
    """Control, residual and Newton derivative blocks at p."""
    p = _check_dual(p, problem)
    params = problem.penalty
    solver = problem.solver

    u = control_from_dual(p, params)
    derivatives = np.array([newton_derivative(q, params) for q in p])
    active = np.diagonal(derivatives, axis1=1, axis2=2) != 0.0

    state = solver.apply_S(u)
    F = p + solver.apply_Sstar(state - problem.yd)
    return Linearization(p=p, u=u, F=F, residual_norm=problem.norm(F),
                         derivatives=derivatives, active=active)


def residual_F(p, problem: SwitchingProblem) -> np.ndarray:
    """F(p) = p + S*(S H_gamma(p) - y^d)."""
    return linearize(p, problem).F


def _coupling(derivatives: np.ndarray, v: np.ndarray, problem: SwitchingProblem) -> np.ndarray:
    """S* S_0 D v."""
    solver = problem.solver
    dv = np.einsum("mij,mj->mi", derivatives, v)
    return solver.apply_Sstar(solver.apply_S0(dv))


def newton_apply(derivatives: np.ndarray, dp, problem: SwitchingProblem) -> np.ndarray:
    """Newton operator dp + S* S_0 D dp with precomputed slice-wise derivatives D."""
    dp = _check_dual(dp, problem)
    return dp + _coupling(derivatives, dp, problem)


def d_inner(derivatives: np.ndarray, v, w, tau: float) -> float:
    """<v, w>_D = tau sum_m v_m^T D_m w_m."""
    return tau * float(np.einsum("mi,mij,mj->", v, derivatives, w))


def solve_newton_step(p_k, problem: SwitchingProblem, settings: SolverSettings,
                      lin: Optional[Linearization] = None) -> Tuple[np.ndarray, int]:
    """Solve (I + S* S_0 D) dp = -F(p_k) by CG in the D-weighted inner product.

    D_m vanishes on inactive components, where the operator reduces to identity
    plus coupling from the active part. CG therefore runs on the active subspace
    (where D is positive definite) and the inactive part is recovered as
    dp_I = rhs_I - (S* S_0 D dp)_I. Convergence is monitored in the Euclidean
    tau-weighted residual norm.
    """
    if lin is None:
        lin = linearize(p_k, problem)
    rhs = -lin.F
    rhs_norm = problem.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), 0

    D = lin.derivatives
    tau = problem.tau
    mask = lin.active.astype(float)
    tol = settings.cg_tol_rel * rhs_norm

    x = np.zeros_like(rhs)
    kx = np.zeros_like(rhs)
    r = rhs * mask
    rnorm = problem.norm(r)
    iterations = 0

    if rnorm > tol:
        direction = r.copy()
        rho = d_inner(D, r, r, tau)
        while iterations < settings.cg_max_iter:
            kd = _coupling(D, direction, problem)
            ad = (direction + kd) * mask
            curvature = d_inner(D, direction, ad, tau)
            if rho <= 0.0 or curvature <= 0.0:
                logger.warning("CG breakdown", extra={"iteration": iterations, "rho": rho,
                                                      "curvature": curvature})
                break
            step = rho / curvature
            x += step * direction
            kx += step * kd
            r -= step * ad
            iterations += 1
            rnorm = problem.norm(r)
            logger.debug("CG iteration", extra={"iteration": iterations, "residual": rnorm / rhs_norm})
            if rnorm <= tol:
                break
            rho_next = d_inner(D, r, r, tau)
            direction = r + (rho_next / rho) * direction
            rho = rho_next

    dp = x + (1.0 - mask) * (rhs - kx)
    return dp, iterations


def line_search(p_k, dp, problem: SwitchingProblem, settings: SolverSettings,
                lin: Optional[Linearization] = None) -> Tuple[np.ndarray, float, Linearization]:
    """Backtracking on the residual norm: largest step in {1, f, f^2, ...} with ||F|| decreasing.

    Returns the new iterate, the accepted step and its linearization.
    """
    p_k = _check_dual(p_k, problem)
    current = lin.residual_norm if lin is not None else problem.norm(residual_F(p_k, problem))
    step = 1.0
    for _ in range(settings.linesearch_max):
        candidate = p_k + step * dp
        trial = linearize(candidate, problem)
        if trial.residual_norm < current:
            return candidate, step, trial
        step *= settings.linesearch_factor
    raise LineSearchFailed(
        f"No residual decrease after {settings.linesearch_max} backtracking steps "
        f"(gamma={problem.penalty.gamma:.1e}, residual={current:.3e})"
    )


def solve_fixed_gamma(p0, problem: SwitchingProblem,
                      settings: SolverSettings) -> Tuple[NewtonState, np.ndarray]:
    """Semismooth Newton iteration at fixed gamma until ||F|| <= tol * ||F(p0)||.

    Returns the final state (with history including s_k, the number of intervals
    whose set of nonzero control components changed) and u_gamma = H_gamma(p).
    """
    gamma = problem.penalty.gamma
    lin = linearize(p0, problem)
    initial = lin.residual_norm
    target = settings.newton_tol_rel * initial
    state = NewtonState(p=lin.p, residual_norm=initial, iteration=0, gamma=gamma,
                        history=[NewtonRecord(iteration=0, residual_norm=initial)])

    while state.residual_norm > target:
        if state.iteration >= settings.newton_max_iter:
            raise NotConverged(
                f"Newton did not converge in {settings.newton_max_iter} iterations "
                f"(gamma={gamma:.1e}, residual={state.residual_norm:.3e})",
                state,
            )
        dp, cg_iterations = solve_newton_step(lin.p, problem, settings, lin)
        try:
            p_next, step, lin_next = line_search(lin.p, dp, problem, settings, lin)
        except LineSearchFailed as exc:
            exc.state = state
            raise

        switched = int(np.count_nonzero(np.any((lin_next.u != 0.0) != (lin.u != 0.0), axis=1)))
        state.iteration += 1
        state.p = p_next
        state.residual_norm = lin_next.residual_norm
        state.history.append(NewtonRecord(iteration=state.iteration, residual_norm=lin_next.residual_norm,
                                          step_size=step, cg_iterations=cg_iterations,
                                          switched_intervals=switched))
        logger.info(
            "Newton iteration",
            extra={"gamma": gamma, "iteration": state.iteration, "residual": lin_next.residual_norm,
                   "step": step, "cg": cg_iterations, "switched": switched},
        )
        lin = lin_next

    state.converged = True
    return state, lin.u


def switching_diagnostics(u, p, params: PenaltyParams) -> SwitchingDiagnostics:
    """tau_j = #intervals with d = j; switch points where argmax |p_m| changes.

    A switch point is counted at interval m >= 1 when both m and m-1 have a
    unique largest |p_j| and its index differs. Exact ties are skipped; d may
    exceed one on either side.
    Components are reported 1-based.
    """
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    if u.shape != p.shape:
        raise ValueError(f"Control shape {u.shape} does not match dual shape {p.shape}")
    n = p.shape[1]

    d = np.array([prox_gstar(q, params).d for q in p], dtype=int)
    tau = {j: int(np.count_nonzero(d == j)) for j in range(1, n + 1)}

    mags = np.abs(p)
    leader = np.argmax(mags, axis=1)
    if n > 1:
        top_two = -np.sort(-mags, axis=1)[:, :2]
        unique = top_two[:, 0] > top_two[:, 1]
    else:
        unique = np.ones(len(p), dtype=bool)
    changes = unique[1:] & unique[:-1] & (leader[1:] != leader[:-1])

    never_active = [i + 1 for i in range(n) if not np.any(u[:, i] != 0.0)]
    return SwitchingDiagnostics(tau=tau, switch_points=int(np.count_nonzero(changes)),
                                never_active=never_active, d=d, envelope=np.abs(u).sum(axis=1))

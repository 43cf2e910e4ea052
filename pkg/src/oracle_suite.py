"""
Brute-force reference computations used to verify the solver.

Nothing here calls prox_core or optimality: the proximal mapping is found by
enumerating active sets, Newton systems are assembled densely from unit-vector
applications of the heat operators, and the regularized problem is minimized
independently by proximal gradient descent.
"""
from __future__ import annotations

import itertools
import logging

import numpy as np

from .heat_fem import SwitchingProblem
from .models import PenaltyParams

logger = logging.getLogger(__name__)


def _prox_objective(w: np.ndarray, q: np.ndarray, params: PenaltyParams) -> np.ndarray:
    """(1/2 gamma)|w - q|^2 + (1/2 alpha)|w|_inf^2 for a stack of candidates w."""
    return (0.5 / params.gamma) * ((w - q) ** 2).sum(axis=-1) \
        + (0.5 / params.alpha) * np.abs(w).max(axis=-1) ** 2


def _subset_masks(n: int) -> np.ndarray:
    codes = np.arange(1, 2**n)
    return ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)


def prox_oracle(q, params: PenaltyParams) -> np.ndarray:
    """Minimizer of (1/2 gamma)|w - q|^2 + (1/2 alpha)|w|_inf^2 by active-set enumeration.

    For every nonempty set A the components in A share the magnitude
    c = alpha sum_A |q_j| / (|A| alpha + gamma) (signs from q) and the rest pass
    through. The candidate with the smallest objective wins.
    """
    q = np.asarray(q, dtype=float)
    n = q.size
    if n > 8:
        raise ValueError(f"prox_oracle enumerates 2^N sets; N={n} exceeds 8")

    masks = _subset_masks(n)
    mags = np.abs(q)
    sizes = masks.sum(axis=1)
    common = params.alpha * (masks * mags).sum(axis=1) / (sizes * params.alpha + params.gamma)
    signs = np.where(q >= 0.0, 1.0, -1.0)
    candidates = np.where(masks, signs[None, :] * common[:, None], q[None, :])
    values = _prox_objective(candidates, q, params)
    return candidates[int(np.argmin(values))].copy()


def conjugate_oracle(q, alpha: float, grid_radius: float = 10.0, grid_points: int = 201) -> float:
    """sup over a cubic grid of <q, v> - (alpha/2)|v|_1^2."""
    q = np.asarray(q, dtype=float)
    if q.size > 3:
        raise ValueError(f"conjugate_oracle supports N <= 3, got {q.size}")
    axis = np.linspace(-grid_radius, grid_radius, grid_points)

    best = -np.inf
    # slice along the first axis to bound memory
    rest = np.stack(np.meshgrid(*([axis] * (q.size - 1)), indexing="ij"), axis=-1).reshape(-1, q.size - 1) \
        if q.size > 1 else np.zeros((1, 0))
    for first in axis:
        v = np.column_stack([np.full(len(rest), first), rest])
        vals = v @ q - 0.5 * alpha * np.abs(v).sum(axis=1) ** 2
        best = max(best, float(vals.max()))
    return best


def _oracle_derivative(q: np.ndarray, params: PenaltyParams) -> np.ndarray:
    """Jacobian of the closed-form regularized subdifferential on the oracle's clamped set."""
    w = prox_oracle(q, params)
    mags = np.abs(w)
    top = mags.max()
    clamped = np.flatnonzero(top - mags <= 1e-12 * top)
    k = clamped.size
    s = np.sign(q[clamped])
    block = (np.eye(k) - params.alpha / (k * params.alpha + params.gamma) * np.outer(s, s)) / params.gamma
    jac = np.zeros((q.size, q.size))
    jac[np.ix_(clamped, clamped)] = block
    return jac


def dense_coupling_matrix(problem: SwitchingProblem) -> np.ndarray:
    """S* S_0 as a dense (M N) x (M N) matrix, column by column from unit vectors."""
    solver = problem.solver
    M, N = problem.shape
    if M * N > 60:
        raise ValueError(f"Dense assembly limited to M*N <= 60, got {M * N}")
    columns = []
    for j in range(M * N):
        e = np.zeros(M * N)
        e[j] = 1.0
        columns.append(solver.apply_Sstar(solver.apply_S0(e.reshape(M, N))).ravel())
    return np.column_stack(columns)


def dense_newton_matrix(problem: SwitchingProblem, p_k) -> np.ndarray:
    """I + S* S_0 D with D assembled from the oracle's active sets."""
    p_k = np.asarray(p_k, dtype=float)
    M, N = problem.shape
    blocks = np.zeros((M * N, M * N))
    for m in range(M):
        blocks[m * N:(m + 1) * N, m * N:(m + 1) * N] = _oracle_derivative(p_k[m], problem.penalty)
    return np.eye(M * N) + dense_coupling_matrix(problem) @ blocks


def oracle_residual(problem: SwitchingProblem, p) -> np.ndarray:
    """F(p) = p + S*(S h(p) - y^d) with h = (q - prox_oracle(q)) / gamma."""
    p = np.asarray(p, dtype=float)
    gamma = problem.penalty.gamma
    u = np.array([(q - prox_oracle(q, problem.penalty)) / gamma for q in p])
    solver = problem.solver
    return p + solver.apply_Sstar(solver.apply_S(u) - problem.yd)


def dense_newton_oracle(problem: SwitchingProblem, p_k) -> np.ndarray:
    """Direct dense solve of (I + S* S_0 D) dp = -F(p_k)."""
    p_k = np.asarray(p_k, dtype=float)
    rhs = -oracle_residual(problem, p_k).ravel()
    if not np.any(rhs):
        return np.zeros_like(p_k)
    matrix = dense_newton_matrix(problem, p_k)
    try:
        return np.linalg.solve(matrix, rhs).reshape(p_k.shape)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"Singular Newton matrix (derivative selection error?): {exc}") from exc


def _prox_g(x: np.ndarray, alpha: float, step: float) -> np.ndarray:
    """prox of step*(alpha/2)|.|_1^2 through Moreau's identity and prox_oracle."""
    return x - step * prox_oracle(x / step, PenaltyParams(alpha=alpha, gamma=1.0 / step))


def proxgrad_reference(problem: SwitchingProblem, iterations: int = 500, step: float = 1e4,
                       return_history: bool = False):
    """Proximal gradient with backtracking on 1/2||Su - y^d||^2 + G(u) + (gamma/2)||u||^2.

    The nonsmooth part G + (gamma/2)||.||^2 is handled exactly per slice:
    prox_{s(g + gamma/2 |.|^2)}(z) = prox_{s' g}(z / (1 + s gamma)), s' = s / (1 + s gamma).
    """
    solver = problem.solver
    alpha, gamma = problem.penalty.alpha, problem.penalty.gamma
    tau = problem.tau

    def smooth(u):
        diff = solver.apply_S(u) - problem.yd
        return 0.5 * solver.observed_inner(diff, diff), diff

    def nonsmooth(u):
        return tau * (0.5 * alpha * float(np.sum(np.abs(u).sum(axis=1) ** 2)) + 0.5 * gamma * float(np.sum(u**2)))

    def prox(z, s):
        shrink = 1.0 + s * gamma
        return np.array([_prox_g(zm / shrink, alpha, s / shrink) for zm in z])

    u = np.zeros(problem.shape)
    value, diff = smooth(u)
    history = [value + nonsmooth(u)]
    for _ in range(iterations):
        grad = solver.apply_Sstar(diff)
        while True:
            candidate = prox(u - step * grad, step)
            delta = candidate - u
            cand_value, cand_diff = smooth(candidate)
            bound = value + tau * float(np.sum(grad * delta)) + (0.5 / step) * tau * float(np.sum(delta**2))
            if cand_value <= bound * (1.0 + 1e-14) + 1e-300 or step < 1e-12:
                break
            step *= 0.5
        u, value, diff = candidate, cand_value, cand_diff
        history.append(value + nonsmooth(u))
        if not np.any(delta):
            break
    logger.debug("Reference solve finished", extra={"objective": history[-1], "step": step})
    return (u, history) if return_history else u

"""
Pointwise convex-analysis kernels for the switching penalty g(v) = (alpha/2)|v|_1^2.

All functions act on a single time slice (a vector of length N). The conjugate
is g*(q) = |q|_inf^2 / (2 alpha); its proximal mapping is computed by sorting
magnitudes and clamping the d largest to a common value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .models import PenaltyParams


@dataclass(frozen=True)
class ProxResult:
    """Value of prox_{gamma g*}(q) together with its clamped (active) components."""
    w: np.ndarray
    d: int
    active_set: Tuple[int, ...]


def _as_slice(q) -> np.ndarray:
    arr = np.asarray(q, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"Expected a non-empty vector, got shape {arr.shape}")
    return arr


def g_value(v, alpha: float) -> float:
    """(alpha/2) * |v|_1^2."""
    v = _as_slice(v)
    return 0.5 * alpha * float(np.sum(np.abs(v))) ** 2


def gstar_value(q, alpha: float) -> float:
    """Fenchel conjugate of g: |q|_inf^2 / (2 alpha)."""
    q = _as_slice(q)
    return float(np.max(np.abs(q))) ** 2 / (2.0 * alpha)


def subdiff_contains(q, u, alpha: float, tol: float = 1e-10) -> bool:
    """Test u in dg*(q) using the componentwise characterization.

    Components below the maximal magnitude must vanish; on the maximizing set A
    u_j = (s_j/alpha) q_j with s_j >= 0 summing to one. A is taken relative to
    max|q_j|, so a tiny nonzero q is not mistaken for the origin.
    """
    q = _as_slice(q)
    u = _as_slice(u)
    if q.shape != u.shape:
        raise ValueError(f"Dimension mismatch: q {q.shape} vs u {u.shape}")

    mags = np.abs(q)
    qmax = float(mags.max())
    if qmax == 0.0:
        # dg*(0) = {0}
        return bool(np.all(np.abs(u) <= tol))

    active = mags >= qmax * (1.0 - tol)
    if np.any(np.abs(u[~active]) > tol):
        return False

    # u_j = (s_j/alpha) q_j  ->  s_j = alpha u_j / q_j; |q_j| is close to qmax > 0 on A
    weights = alpha * u[active] / q[active]
    scaled_tol = tol * max(1.0, alpha / qmax)
    if np.any(weights < -scaled_tol):
        return False
    return bool(abs(weights.sum() - 1.0) <= scaled_tol)


def prox_gstar(q, params: PenaltyParams) -> ProxResult:
    """Proximal mapping of gamma*g* at q.

    Indices are sorted by decreasing |q_i| (stable); d is the smallest index with
    |q_(d+1)| < alpha/(d alpha + gamma) * sum_{i<=d} |q_(i)|, else N. The d largest
    components are clamped to that common magnitude with their original signs.
    """
    q = _as_slice(q)
    alpha, gamma = params.alpha, params.gamma
    n = q.size

    mags = np.abs(q)
    order = np.argsort(-mags, kind="stable")
    sorted_mags = mags[order]
    csum = np.cumsum(sorted_mags)

    d = n
    if n > 1:
        ks = np.arange(1, n)
        thresholds = alpha * csum[:-1] / (ks * alpha + gamma)
        hits = np.flatnonzero(sorted_mags[1:] < thresholds)
        if hits.size:
            d = int(hits[0]) + 1

    active = order[:d]
    magnitude = alpha * csum[d - 1] / (d * alpha + gamma)
    w = q.copy()
    w[active] = np.sign(q[active]) * magnitude
    return ProxResult(w=w, d=d, active_set=tuple(int(i) for i in active))


def hgamma(q, params: PenaltyParams) -> np.ndarray:
    """Moreau-Yosida regularized subdifferential (q - prox_{gamma g*}(q)) / gamma.

    Evaluated in the cancellation-free form
    h_j = sign(q_j) (alpha (d|q_j| - sum_A |q_i|) / gamma + |q_j|) / (d alpha + gamma)
    on the active set and 0 elsewhere, so small gamma does not amplify rounding.
    """
    q = _as_slice(q)
    alpha, gamma = params.alpha, params.gamma
    prox = prox_gstar(q, params)
    d = prox.d
    active = np.asarray(prox.active_set, dtype=int)

    mags = np.abs(q[active])
    # pairwise differences are exact for nearby magnitudes
    spread = (mags[:, None] - mags[None, :]).sum(axis=1)
    u = np.zeros_like(q)
    u[active] = np.sign(q[active]) * (alpha * spread / gamma + mags) / (d * alpha + gamma)
    return u


def newton_derivative(q, params: PenaltyParams) -> np.ndarray:
    """Symmetric Newton derivative of hgamma at q (Clarke selection from the strict d-rule).

    Clamped components with q_j = 0 (only possible at q = 0) keep the diagonal
    entry ((d-1) alpha + gamma) / (gamma (d alpha + gamma)) instead of a zero row.
    """
    q = _as_slice(q)
    alpha, gamma = params.alpha, params.gamma
    prox = prox_gstar(q, params)
    d = prox.d
    active = np.asarray(prox.active_set, dtype=int)

    denom = gamma * (d * alpha + gamma)
    signs = np.sign(q[active])
    block = -(alpha / denom) * np.outer(signs, signs)
    block[np.diag_indices(d)] = ((d - 1) * alpha + gamma) / denom

    jac = np.zeros((q.size, q.size))
    jac[np.ix_(active, active)] = block
    return jac

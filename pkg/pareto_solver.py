"""
Min-norm solver for multiple-gradient descent.

Given task gradients g_1..g_m, finds simplex weights alpha minimising
||sum_i alpha_i g_i||^2. The solver only sees the Gram matrix
M_ij = g_i . g_j, so no more than m full gradients are ever held.

Frank-Wolfe on the simplex: start at the uniform point, move toward the
vertex with the smallest (M alpha)_j using the exact line search, and stop
when the duality gap alpha^T M alpha - min_j (M alpha)_j is within
tol * (1 + alpha^T M alpha). With `corrective=True` (default) every step is
followed by an exact re-minimisation over the current support (Wolfe's
minor cycle).
"""

import logging
from typing import Optional, Sequence

import numpy as np

from cau_utils import SolverError

logger = logging.getLogger(__name__)

MAX_TASKS = 8
SIMPLEX_TOL = 1e-9


def gram(gradients: Sequence[np.ndarray]) -> np.ndarray:
    """
    Pairwise dot products of the task gradients.

    Raises:
        SolverError: If fewer than 2 or more than 8 gradients are given or
            their lengths differ
    """
    if not 2 <= len(gradients) <= MAX_TASKS:
        raise SolverError(f"Expected between 2 and {MAX_TASKS} gradients, got {len(gradients)}")
    lengths = {np.shape(g) for g in gradients}
    if len(lengths) != 1:
        raise SolverError(f"Gradient shapes differ: {sorted(lengths)}")
    stacked = np.stack([np.asarray(g, dtype=np.float64).ravel() for g in gradients])
    M = stacked @ stacked.T
    return 0.5 * (M + M.T)


def objective(M: np.ndarray, alpha: np.ndarray) -> float:
    return float(alpha @ M @ alpha)


def _support_minimizer(M: np.ndarray, support: np.ndarray) -> Optional[np.ndarray]:
    """Minimise y^T M_S y subject to sum(y) = 1 with no sign constraint."""
    k = support.size
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = M[np.ix_(support, support)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    y = solution[:k]
    if not np.all(np.isfinite(y)) or abs(y.sum() - 1.0) > 1e-9:
        return None
    return y


def _corrective_step(M: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Re-minimise over the support of alpha, shrinking it whenever a weight hits zero."""
    x = alpha.copy()
    for _ in range(x.size + 1):
        support = np.flatnonzero(x > 0)
        y = _support_minimizer(M, support)
        if y is None:
            break
        current = x[support]
        if np.all(y > 0):
            candidate = np.zeros_like(x)
            candidate[support] = y
            if objective(M, candidate) <= objective(M, x):
                x = candidate
            break

        blocked = y <= 0
        ratios = current[blocked] / (current[blocked] - y[blocked])
        theta = float(ratios.min())
        moved = current + theta * (y - current)
        moved[np.flatnonzero(blocked)[np.argmin(ratios)]] = 0.0
        candidate = np.zeros_like(x)
        candidate[support] = np.clip(moved, 0.0, None)
        if objective(M, candidate) > objective(M, x) + 1e-15 * (1.0 + objective(M, x)):
            break
        x = candidate / candidate.sum()
    return x


def _project(alpha: np.ndarray) -> np.ndarray:
    alpha = np.clip(alpha, 0.0, None)
    total = alpha.sum()
    if total <= 0:
        return np.full(alpha.size, 1.0 / alpha.size)
    return alpha / total


def solve_min_norm(M: np.ndarray, tol: float = 1e-6, max_iter: int = 100, corrective: bool = True) -> np.ndarray:
    """
    Frank-Wolfe solution of min alpha^T M alpha over the probability simplex.

    Args:
        M: Symmetric positive semidefinite Gram matrix (m x m)
        tol: Duality-gap tolerance, relative to (1 + objective)
        max_iter: Maximum number of Frank-Wolfe iterations
        corrective: Re-minimise over the active support after each step

    Returns:
        Simplex weights alpha (non-negative, summing to 1)

    Raises:
        SolverError: If M is not square or holds non-finite entries
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise SolverError(f"Gram matrix must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise SolverError("Gram matrix has non-finite entries")

    m = M.shape[0]
    alpha = np.full(m, 1.0 / m)
    scale = float(np.max(np.diag(M)))
    if scale <= 0.0:
        # every gradient is zero, any alpha is optimal
        return alpha

    # alpha is invariant to positive rescaling of M; the tolerance is tightened for scale > 1
    Ms = M / scale
    tol_s = tol / max(1.0, scale)

    for iteration in range(1, max_iter + 1):
        Ma = Ms @ alpha
        current = float(alpha @ Ma)
        j = int(np.argmin(Ma))
        gap = current - Ma[j]
        if gap <= tol_s * (1.0 + current):
            break

        curvature = current - 2.0 * Ma[j] + Ms[j, j]
        if curvature <= 0.0:
            break
        gamma = min(max(gap / curvature, 0.0), 1.0)
        candidate = (1.0 - gamma) * alpha
        candidate[j] += gamma
        if corrective:
            candidate = _corrective_step(Ms, candidate)

        decrease = current - objective(Ms, candidate)
        alpha = candidate
        if not corrective and decrease < tol_s:
            break
    else:
        logger.debug(f"Min-norm solver stopped at max_iter={max_iter} with gap {gap:.3e}")

    return _project(alpha)


def combine(gradients: Sequence[np.ndarray], alpha: np.ndarray) -> np.ndarray:
    """
    Weighted sum of task gradients.

    Raises:
        SolverError: If alpha is not a valid simplex point for the gradients
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (len(gradients),):
        raise SolverError(f"Expected {len(gradients)} weights, got shape {alpha.shape}")
    if np.any(alpha < -SIMPLEX_TOL) or abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
        raise SolverError(f"Weights {alpha} are not on the simplex")
    out = np.zeros_like(np.asarray(gradients[0], dtype=np.float64))
    for weight, g in zip(alpha, gradients):
        out += weight * g
    return out


def normalize_gradients(gradients: Sequence[np.ndarray]) -> list:
    """Scale each gradient to unit l2 norm; zero gradients stay zero."""
    out = []
    for g in gradients:
        norm = float(np.linalg.norm(g))
        out.append(g / norm if norm > 0 else np.zeros_like(g))
    return out

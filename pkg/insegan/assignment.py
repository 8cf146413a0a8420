"""Column matching for latent sets: Hungarian, IPOT and greedy.

All solvers take an (n, n) cost matrix and return ``pi`` with ``pi[i]`` the
column assigned to row ``i``.
"""

import logging
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .config import IPOT_BETA, IPOT_INNER, IPOT_ITERS

logger = logging.getLogger(__name__)

MARGINAL_TOL: float = 1e-9
MAX_BALANCE_SWEEPS: int = 1000


def _check_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def assignment_cost(cost: np.ndarray, pi: np.ndarray) -> float:
    """Total cost of assignment ``pi``."""
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, pi[i]] for i in range(len(pi))))


def _optimum(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching with a lexicographic tie-break.

    The optimum comes from ``scipy.optimize.linear_sum_assignment``; among all
    optimal assignments the lexicographically smallest ``pi`` is returned,
    fixing rows one at a time to the smallest column that keeps the optimum.

    Raises:
        ValueError: If the matrix is not square or not finite.
    """
    cost = _check_cost(cost)
    n = cost.shape[0]
    best = _optimum(cost)
    tol = 1e-9 * max(1.0, abs(best))

    pi = np.empty(n, dtype=np.int64)
    free = list(range(n))
    fixed = 0.0
    for row in range(n):
        rest_rows = np.arange(row + 1, n)
        for col in free:
            rest_cols = np.array([c for c in free if c != col], dtype=np.int64)
            rest = _optimum(cost[np.ix_(rest_rows, rest_cols)])
            if fixed + cost[row, col] + rest <= best + tol:
                pi[row] = col
                fixed += cost[row, col]
                free.remove(col)
                break
        else:
            # Only reachable through rounding; fall back to scipy's answer.
            logger.debug("lexicographic refinement failed at row %d", row)
            return linear_sum_assignment(cost)[1].astype(np.int64)
    return pi


def ipot_align(
    cost: np.ndarray,
    beta: float = IPOT_BETA,
    iters: int = IPOT_ITERS,
    inner: int = IPOT_INNER,
) -> np.ndarray:
    """Inexact proximal-point optimal transport between uniform marginals.

    Each outer step multiplies the previous plan by exp(−C/beta) and runs
    ``inner`` Sinkhorn sweeps; everything is carried in log space. A final
    balancing pass brings both marginals to 1/n.

    Returns:
        Doubly stochastic plan (n, n) scaled so rows and columns sum to 1/n.

    Raises:
        ValueError: On a bad cost matrix, ``beta <= 0`` or ``iters < 1``.
    """
    cost = _check_cost(cost)
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if iters < 1 or inner < 1:
        raise ValueError(f"iters and inner must be >= 1, got {iters}, {inner}")
    n = cost.shape[0]
    log_marginal = -np.log(n)

    log_kernel = -cost / beta
    log_plan = np.full((n, n), 2 * log_marginal)
    log_b = np.zeros(n)
    for _ in range(iters):
        log_q = log_kernel + log_plan
        for _ in range(inner):
            log_a = log_marginal - logsumexp(log_q + log_b[None, :], axis=1)
            log_b = log_marginal - logsumexp(log_q + log_a[:, None], axis=0)
        log_plan = log_a[:, None] + log_q + log_b[None, :]

    for _ in range(MAX_BALANCE_SWEEPS):
        log_plan = log_plan + (log_marginal - logsumexp(log_plan, axis=1))[:, None]
        log_plan = log_plan + (log_marginal - logsumexp(log_plan, axis=0))[None, :]
        plan = np.exp(log_plan)
        if np.abs(plan.sum(axis=1) - 1.0 / n).max() < MARGINAL_TOL:
            break
    return np.exp(log_plan)


def round_plan(plan: np.ndarray) -> np.ndarray:
    """Round a transport plan to a permutation.

    Row-wise argmax; when two rows claim the same column, the assignment is
    repaired with a Hungarian match maximizing transported mass.
    """
    plan = np.asarray(plan, dtype=np.float64)
    pi = plan.argmax(axis=1)
    if len(np.unique(pi)) == len(pi):
        return pi.astype(np.int64)
    return hungarian(plan.max() - plan)


def greedy_match(cost: np.ndarray) -> np.ndarray:
    """Rows in order each take their cheapest remaining column."""
    cost = _check_cost(cost)
    n = cost.shape[0]
    pi = np.empty(n, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    for row in range(n):
        candidates = np.where(taken, np.inf, cost[row])
        col = int(np.argmin(candidates))
        pi[row] = col
        taken[col] = True
    return pi


def match(cost: np.ndarray, mode: str, beta: Optional[float] = None) -> np.ndarray:
    """Dispatch to the aligner named by ``mode`` (ot, hungarian or greedy)."""
    if mode == "hungarian":
        return hungarian(cost)
    if mode == "ot":
        return round_plan(ipot_align(cost, beta=IPOT_BETA if beta is None else beta))
    if mode == "greedy":
        return greedy_match(cost)
    raise ValueError(f"Unknown aligner: {mode!r}")

"""Approximate G-optimal designs over finite action lists.

``g`` is measured with the *squared* inverse-information norm, so the
Kiefer-Wolfowitz optimum on a spanning set equals the dimension ``d``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .types import Design

__all__ = [
    "COND_MAX",
    "PRUNE_EPS",
    "SingularDesignError",
    "CoverTooLargeError",
    "discretize_lp_ball",
    "frank_wolfe_design",
    "g_value",
    "greedy_spanning_subset",
    "guarded_inverse",
    "info_matrix",
    "leverages",
]

COND_MAX = 1e12
PRUNE_EPS = 1e-6


class SingularDesignError(np.linalg.LinAlgError):
    """Information matrix is singular (or too ill-conditioned to invert)."""

    def __init__(self, message: str, rank_deficiency: int):
        super().__init__(message)
        self.rank_deficiency = rank_deficiency


class CoverTooLargeError(ValueError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"discretisation would produce ~{count} actions (cap {cap})")
        self.count = count
        self.cap = cap


def _as_matrix(actions) -> np.ndarray:
    """Rows are actions; a flat sequence is read as scalar (d = 1) actions."""
    A = np.asarray(actions, dtype=np.float64)
    return A[:, None] if A.ndim == 1 else A


def guarded_inverse(V: np.ndarray, cond_max: float = COND_MAX) -> np.ndarray:
    """Inverse of a symmetric PSD matrix via its eigendecomposition.

    Raises ``SingularDesignError`` carrying the number of eigenvalues below
    ``max_eig / cond_max``.
    """
    V = 0.5 * (V + V.T)
    w, U = np.linalg.eigh(V)
    top = w[-1] if w.size else 0.0
    if top <= 0:
        raise SingularDesignError("information matrix is zero", V.shape[0])
    small = int(np.sum(w <= top / cond_max))
    if small:
        raise SingularDesignError(
            f"information matrix is singular: rank deficiency {small} (condition guard {cond_max:g})", small
        )
    return (U / w) @ U.T


def info_matrix(actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_a w(a) a a^T`` for dense weights aligned with ``actions``."""
    A = np.asarray(actions, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return (A.T * w) @ A


def leverages(actions: np.ndarray, V_inv: np.ndarray) -> np.ndarray:
    """``a^T V^{-1} a`` for every row of ``actions``."""
    return np.einsum("ij,jk,ik->i", actions, V_inv, actions)


def g_value(design: Design, actions, query=None) -> float:
    """Worst-case squared inverse-information norm of ``design``.

    The maximum runs over ``query`` when given, otherwise over ``actions``.
    A singular information matrix is accepted when every query lies in its
    range (pseudo-inverse); otherwise ``SingularDesignError`` is raised.
    """
    A = _as_matrix(actions)
    V = info_matrix(A[design.support], design.weights)
    Q = A if query is None else _as_matrix(query)
    try:
        return float(leverages(Q, guarded_inverse(V)).max())
    except SingularDesignError:
        # a singular V still measures queries inside its range
        w, U = np.linalg.eigh(0.5 * (V + V.T))
        keep = w > w[-1] / COND_MAX
        R = U[:, keep]
        if np.abs(Q - (Q @ R) @ R.T).max() > 1e-9 * max(1.0, np.abs(Q).max()):
            raise
        return float(leverages(Q @ R, np.diag(1.0 / w[keep])).max())


def greedy_spanning_subset(actions: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Greedy max-volume choice of ``d`` linearly independent rows.

    Each step takes the row with the largest residual after projecting out
    the rows already chosen (lowest index on ties).
    """
    A = np.asarray(actions, dtype=np.float64)
    K, d = A.shape
    R = A.copy()
    chosen = []
    scale = max(np.abs(A).max(), 1.0)
    for _ in range(d):
        norms = np.einsum("ij,ij->i", R, R)
        norms[chosen] = -1.0
        k = int(np.argmax(norms))
        if norms[k] <= (tol * scale) ** 2:
            raise SingularDesignError(
                f"actions do not span R^{d}: rank deficiency {d - len(chosen)}", d - len(chosen)
            )
        chosen.append(k)
        u = R[k] / math.sqrt(norms[k])
        R -= np.outer(R @ u, u)
    return np.array(chosen, dtype=np.int64)


def _g_of(A: np.ndarray, pi: np.ndarray) -> tuple[float, np.ndarray]:
    lev = leverages(A, guarded_inverse(info_matrix(A, pi)))
    return float(lev.max()), lev


def frank_wolfe_design(
    actions,
    target_g: float | None = None,
    max_iters: int = 1000,
    prune_eps: float = PRUNE_EPS,
) -> Design:
    """Approximate G-optimal design by Frank-Wolfe with away steps.

    Starts from the uniform design on a greedy spanning subset.  Each
    iteration takes the log-det optimal toward step (mass to the action with
    the largest leverage) or away step (mass off the support action with the
    smallest leverage), whichever has the larger duality gap.  By
    Kiefer-Wolfowitz, maximising log det V drives ``g`` to ``d``.  The design
    returned, and the ``history`` of g-values, track the best iterate seen,
    so ``history`` is non-increasing.

    Parameters
    ----------
    actions : array (K, d)
        Must span R^d.
    target_g : float, optional
        Stop once ``g <= target_g``.  Defaults to ``2 d``; must be >= d.
    max_iters : int
        Iteration budget.  If exhausted above the target the returned
        design has ``converged=False``.
    prune_eps : float
        Final weights below this are dropped and the rest renormalised.
    """
    A = _as_matrix(actions)
    K, d = A.shape
    if target_g is None:
        target_g = 2.0 * d
    if target_g < d:
        raise ValueError(f"target_g={target_g} is below the Kiefer-Wolfowitz optimum d={d}")

    pi = np.zeros(K)
    pi[greedy_spanning_subset(A)] = 1.0 / d
    g, lev = _g_of(A, pi)
    best_pi, best_g = pi.copy(), g
    history = [g]
    it = 0
    while best_g > target_g and it < max_iters:
        it += 1
        k = int(np.argmax(lev))
        supp = np.flatnonzero(pi > 0)
        j = int(supp[np.argmin(lev[supp])])
        if lev[k] - d >= d - lev[j] or supp.size == 1:
            gk = lev[k]
            step = (gk / d - 1.0) / (gk - 1.0)
            pi *= 1.0 - step
            pi[k] += step
        else:
            gj = lev[j]
            step_max = pi[j] / (1.0 - pi[j])
            u = (d - gj) / (gj * (d - 1))
            step = min(u / (1.0 - u), step_max)
            pi *= 1.0 + step
            pi[j] -= step
            if step == step_max:
                pi[j] = 0.0
        pi = np.clip(pi, 0.0, None)
        pi /= pi.sum()
        g, lev = _g_of(A, pi)
        if g < best_g:
            best_pi, best_g = pi.copy(), g
        history.append(best_g)

    pruned = Design.from_dense(best_pi, prune_eps=prune_eps)
    g_final = g_value(pruned, A)
    return Design(
        support=pruned.support,
        weights=pruned.weights,
        g=g_final,
        converged=bool(g_final <= target_g * (1 + 1e-9)),
        iterations=it,
        history=tuple(history),
    )


def discretize_lp_ball(d: int, p: float, eps: float, cap: int = 200_000) -> np.ndarray:
    """A finite eps-cover (in l2) of the unit lp sphere.

    Points of a regular grid on the surface of the cube ``[-1, 1]^d`` are
    pushed radially onto the lp sphere.  That map is Lipschitz with constant
    ``1 + d^|1/p - 1/2|`` on the cube surface, which fixes the grid spacing.

    Raises ``CoverTooLargeError`` when the cover would exceed ``cap`` points.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if d == 1:
        return np.array([[-1.0], [1.0]])
    inv_p = 0.0 if math.isinf(p) else 1.0 / p
    lip = 1.0 + d ** abs(inv_p - 0.5)
    h = 2.0 * eps / (lip * math.sqrt(d - 1))
    m = int(math.ceil(2.0 / h)) + 1
    estimate = 2 * d * m ** (d - 1)
    if estimate > cap:
        raise CoverTooLargeError(estimate, cap)
    axis = np.linspace(-1.0, 1.0, m)
    pts = []
    for i, s in itertools.product(range(d), (-1.0, 1.0)):
        grid = np.array(list(itertools.product(axis, repeat=d - 1)))
        face = np.insert(grid, i, s, axis=1)
        pts.append(face)
    P = np.unique(np.round(np.vstack(pts), 12), axis=0)
    norms = np.linalg.norm(P, ord=np.inf if math.isinf(p) else p, axis=1)
    return P / norms[:, None]


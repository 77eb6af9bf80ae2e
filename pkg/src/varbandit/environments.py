"""Parameter-noise bandit environments, gap oracles and variance functionals.

Rewards are ``X_t = a_t^T theta_t`` with ``theta_t`` drawn i.i.d. from a
bounded distribution: every draw satisfies ``|a^T theta_t| <= 1`` for every
feasible action ``a``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .types import (
    ActionSet,
    Diagnostics,
    FiniteActions,
    LpBall,
    RewardModel,
    SamplerKind,
    conjugate_exponent,
    derive_rng_stream,
)

__all__ = [
    "FEAS_TOL",
    "InfeasibleActionError",
    "LinearBanditEnv",
    "LowerBoundConstruction",
    "LowerBoundInstance",
    "best_action_lp",
    "diagnostics",
    "gap",
    "lp_norm",
    "make_lower_bound_env",
    "max_variance",
    "random_unit_actions",
    "sigma_of_action",
    "sigma_q_sq",
]

FEAS_TOL = 1e-9
LOWER_BOUND_C = 73.0
_MAX_REJECTION_ROUNDS = 10_000
_MIN_ACCEPTANCE = 1e-4


class InfeasibleActionError(ValueError):
    pass


def lp_norm(x, p: float, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if math.isinf(p):
        return np.abs(x).max(axis=axis)
    if p == 1:
        return np.abs(x).sum(axis=axis)
    m = np.abs(x).max(axis=axis, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    return np.squeeze(m, axis=axis) * (np.abs(x / safe) ** p).sum(axis=axis) ** (1.0 / p)


def best_action_lp(theta, q: float) -> np.ndarray:
    """Maximiser of ``a^T theta`` over the unit lp ball, ``p`` dual to ``q``.

    ``a_i = sign(theta_i) |theta_i|^(q-1) / ||theta||_q^(q-1)``, which has
    unit p-norm and attains ``a^T theta = ||theta||_q``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not q >= 1:
        raise ValueError(f"q must be >= 1, got {q}")
    scale = np.abs(theta).max() if theta.size else 0.0
    if not scale > 0:
        raise ValueError("best_action_lp is undefined at theta = 0")
    u = theta / scale
    if q == 1:
        return np.sign(u)
    powered = np.sign(u) * np.abs(u) ** (q - 1.0)
    return powered / lp_norm(u, q) ** (q - 1.0)


def sigma_q_sq(Sigma, q: float) -> float:
    """``(sum_i Sigma_ii^(q/2))^(2/q)``, the l_q variance functional."""
    diag = np.diag(np.atleast_2d(np.asarray(Sigma, dtype=np.float64)))
    if np.any(diag < 0):
        raise ValueError("covariance diagonal must be non-negative")
    if math.isinf(q):
        return float(diag.max())
    return float(np.sum(diag ** (q / 2.0)) ** (2.0 / q))


def sigma_of_action(Sigma, a) -> float:
    """Reward variance ``a^T Sigma a`` of action ``a``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    S = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    if S.shape != (a.size, a.size):
        raise ValueError(f"dimension mismatch: Sigma {S.shape}, a {a.shape}")
    return float(max(a @ S @ a, 0.0))


def random_unit_actions(K: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """``K`` i.i.d. uniform directions on the unit l2 sphere."""
    A = rng.standard_normal((K, d))
    return A / np.linalg.norm(A, axis=1, keepdims=True)


class LinearBanditEnv:
    """A single-owner bandit environment.

    ``pull`` accepts an action index for finite sets, or an action vector
    (for balls, or for finite sets when it matches a listed action).
    """

    def __init__(self, action_set: ActionSet, reward_model: RewardModel, rng: np.random.Generator):
        if action_set.d != reward_model.d:
            raise ValueError(f"dimension mismatch: actions d={action_set.d}, theta d={reward_model.d}")
        self.action_set = action_set
        self.reward_model = reward_model
        self.rng = rng
        self.t = 0
        self.accepted = 0
        self.proposed = 0
        theta = reward_model.theta_star
        if isinstance(action_set, FiniteActions):
            values = action_set.actions @ theta
            self.best_index = int(np.argmax(values))
            self.optimal_value = float(values[self.best_index])
            self._means = values
        else:
            self.best_index = -1
            self.optimal_value = float(lp_norm(theta, action_set.q))
            self._means = None

    @property
    def d(self) -> int:
        return self.action_set.d

    @property
    def is_finite(self) -> bool:
        return isinstance(self.action_set, FiniteActions)

    # -- actions ------------------------------------------------------------

    def resolve(self, action) -> tuple[np.ndarray, int]:
        """Return ``(vector, index)``; index is -1 for ball actions."""
        if isinstance(action, (int, np.integer)):
            if not self.is_finite:
                raise InfeasibleActionError("integer actions require a finite action set")
            if not 0 <= action < self.action_set.K:
                raise InfeasibleActionError(f"action index {action} out of range")
            return self.action_set.actions[action], int(action)
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.size != self.d:
            raise InfeasibleActionError(f"action has dimension {a.size}, expected {self.d}")
        if self.is_finite:
            hits = np.flatnonzero(np.all(np.abs(self.action_set.actions - a) <= FEAS_TOL, axis=1))
            if hits.size == 0:
                raise InfeasibleActionError("action is not in the finite action set")
            return self.action_set.actions[hits[0]], int(hits[0])
        norm = lp_norm(a, self.action_set.p)
        if norm > 1.0 + FEAS_TOL:
            raise InfeasibleActionError(f"||a||_p = {norm:.6g} exceeds 1")
        return a, -1

    def gap(self, action) -> float:
        a, idx = self.resolve(action)
        if idx >= 0:
            return float(self.optimal_value - self._means[idx])
        return float(max(self.optimal_value - a @ self.reward_model.theta_star, 0.0))

    def best_action(self) -> np.ndarray:
        if self.is_finite:
            return self.action_set.actions[self.best_index]
        return best_action_lp(self.reward_model.theta_star, self.action_set.q)

    # -- sampling -----------------------------------------------------------

    def dual_bound(self, thetas: np.ndarray) -> np.ndarray:
        """``sup_a |a^T theta|`` over the feasible set, per row of ``thetas``."""
        if self.is_finite:
            return np.abs(thetas @ self.action_set.actions.T).max(axis=1)
        return lp_norm(thetas, self.action_set.q, axis=1)

    def sample_thetas(self, n: int) -> np.ndarray:
        """``n`` bounded parameter draws, shape ``(n, d)``."""
        model = self.reward_model
        radius = model.bound_radius
        if model.sampler_kind is SamplerKind.POINT_MASS or n == 0:
            return np.broadcast_to(model.theta_star, (n, self.d)).copy()
        if model.sampler_kind is SamplerKind.GAUSSIAN_CLIP:
            th = model.raw_draws(self.rng, n)
            scale = np.maximum(self.dual_bound(th) / radius, 1.0)
            return th / scale[:, None]
        out = []
        need = n
        for _ in range(_MAX_REJECTION_ROUNDS):
            rate = (self.accepted + 1.0) / (self.proposed + 1.0)
            batch = int(min(max(need / rate * 1.1 + 8, 16), 4_000_000))
            th = model.raw_draws(self.rng, batch)
            ok = self.dual_bound(th) <= radius
            self.proposed += batch
            self.accepted += int(ok.sum())
            kept = th[ok][:need]
            out.append(kept)
            need -= kept.shape[0]
            if need == 0:
                return np.vstack(out)
            if self.proposed >= 1_000_000 and self.acceptance_rate < _MIN_ACCEPTANCE:
                break
        raise RuntimeError(
            f"rejection sampler acceptance too low ({self.acceptance_rate:.2e}); "
            "shrink the covariance or the mean"
        )

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 1.0

    def pull_many(self, action, n: int) -> np.ndarray:
        """Play ``action`` ``n`` times; returns the ``n`` rewards."""
        a, _ = self.resolve(action)
        if n <= 0:
            return np.empty(0)
        rewards = self.sample_thetas(n) @ a
        self.t += n
        return rewards

    def pull(self, action) -> float:
        return float(self.pull_many(action, 1)[0])


def gap(env: LinearBanditEnv, action) -> float:
    """Sub-optimality gap of ``action`` against the mean parameter."""
    return env.gap(action)


def max_variance(Sigma, action_set: ActionSet, iters: int = 200) -> float:
    """``max_a a^T Sigma a`` over the action set.

    Exact for finite sets and for the l2 ball; for other balls a
    conditional-gradient ascent (``a <- best_action_lp(Sigma a)``) from every
    basis vector and the top eigenvector, which is monotone for convex
    objectives.
    """
    S = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    if isinstance(action_set, FiniteActions):
        A = action_set.actions
        return float(np.einsum("ij,jk,ik->i", A, S, A).max())
    p, q, d = action_set.p, action_set.q, action_set.d
    if p == 2:
        return float(max(np.linalg.eigvalsh(S)[-1], 0.0))
    if not np.any(S):
        return 0.0
    starts = list(np.eye(d))
    v = np.linalg.eigh(S)[1][:, -1]
    starts.append(v / lp_norm(v, p))
    best = 0.0
    for a in starts:
        val = a @ S @ a
        for _ in range(iters):
            grad = S @ a
            if not np.any(grad):
                break
            a_new = best_action_lp(grad, q)
            val_new = a_new @ S @ a_new
            if val_new <= val * (1 + 1e-13):
                break
            a, val = a_new, val_new
        best = max(best, val)
    return float(best)


def diagnostics(env: LinearBanditEnv, Sigma=None) -> Diagnostics:
    """Variance functionals of ``env`` (or of an overriding ``Sigma``)."""
    S = env.reward_model.covariance if Sigma is None else np.asarray(Sigma, dtype=np.float64)
    aset = env.action_set
    if isinstance(aset, FiniteActions):
        q = 2.0
        max_a_sq = float(np.einsum("ij,ij->i", aset.actions, aset.actions).max())
    else:
        q = aset.q
        max_a_sq = 1.0 if aset.p <= 2 else float(aset.d ** (1.0 - 2.0 / aset.p))
    smax = max_variance(S, aset)
    return Diagnostics(
        sigma_q_sq=sigma_q_sq(S, q),
        sigma_max_sq=smax,
        m_sigma=min(smax, max_a_sq * float(np.trace(S))),
        theta_star_dual_norm=float(lp_norm(env.reward_model.theta_star, q)),
    )


# ---------------------------------------------------------------------------
# Lower-bound instances


class LowerBoundConstruction(str, enum.Enum):
    P_LE_2 = "PLe2"
    P_GT_2 = "PGt2"


@dataclass(frozen=True, eq=False)
class LowerBoundInstance:
    """A hard instance drawn with a random sign vector ``xi``.

    ``sigma_sq`` is the requested variance level; ``scale`` the factor
    applied to every parameter draw (1/2 for PGt2 so rewards stay in
    [-1, 1]); ``effective_sigma_sq = scale**2 * sigma_sq`` is the level of
    the environment actually built.
    """

    xi: np.ndarray
    epsilon: float
    construction: LowerBoundConstruction
    theta_star: np.ndarray
    covariance: np.ndarray
    q: float
    sigma_sq: float
    scale: float
    horizon: int

    @property
    def effective_sigma_sq(self) -> float:
        return self.scale**2 * self.sigma_sq


def make_lower_bound_env(
    d: int,
    sigma_sq: float,
    T: int,
    q: float,
    construction: Union[str, LowerBoundConstruction] = LowerBoundConstruction.P_LE_2,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
    sampler_kind: SamplerKind = SamplerKind.GAUSSIAN_REJECTION,
) -> tuple[LinearBanditEnv, LowerBoundInstance]:
    """Build a Gaussian lower-bound instance with ``xi ~ Uniform{-1, 1}^d``.

    PLe2 (ball with ``p <= 2``, ``q >= 2``): mean ``eps * xi`` with
    ``eps = d^(1/2 - 1/q) sigma / (2 sqrt(2T))`` and covariance
    ``sigma^2 / d^(2/q) * I``.

    PGt2 (ball with ``p > 2``, ``q`` in [1, 2)): dimension ``d + 1``, mean
    ``(1, eps * xi)`` with ``eps^q = sigma / (73 sqrt(T))``, covariance
    ``diag(sigma^2 / 2, sigma^2 / (2 d^(2/q)) I)``; everything is scaled by
    1/2 so that the mean has q-norm at most 1.

    ``xi`` is drawn from ``seed``; the environment's stream is ``rng`` or,
    by default, an independent stream derived from the same seed.
    """
    construction = LowerBoundConstruction(construction)
    if d < 1 or T < 1:
        raise ValueError("d and T must be positive")
    if not sigma_sq > 0:
        raise ValueError("sigma_sq must be > 0")
    sigma = math.sqrt(sigma_sq)
    xi = np.where(np.random.default_rng(seed).random(d) < 0.5, -1.0, 1.0)
    if rng is None:
        rng = derive_rng_stream(seed, 1)

    if construction is LowerBoundConstruction.P_LE_2:
        if not q >= 2:
            raise ValueError(f"PLe2 needs q >= 2, got {q}")
        if T < d:
            raise ValueError(f"PLe2 needs T >= d (T={T}, d={d})")
        eps = d ** (0.5 - 1.0 / q) * sigma / (2.0 * math.sqrt(2.0 * T))
        theta = eps * xi
        cov = sigma_sq / d ** (2.0 / q) * np.eye(d)
        norm = float(lp_norm(theta, q))
        if norm > 1.0:
            raise ValueError(f"||theta*||_q = {norm:.4g} > 1; decrease sigma_sq or increase T")
        scale = 1.0
        ball = LpBall(d, conjugate_exponent(q))
    else:
        if not 1 <= q < 2:
            raise ValueError(f"PGt2 needs q in [1, 2), got {q}")
        if T < d ** (4.0 / (2.0 - q)):
            warnings.warn(
                f"T={T} is below d^(4/(2-q)) = {d ** (4.0 / (2.0 - q)):.3g}; the hardness guarantee "
                "does not apply at this horizon",
                stacklevel=2,
            )
        eps = (sigma / (LOWER_BOUND_C * math.sqrt(T))) ** (1.0 / q)
        raw_theta = np.concatenate([[1.0], eps * xi])
        norm = float(lp_norm(raw_theta, q))
        if norm > 2.0:
            raise ValueError(f"||theta*||_q = {norm:.4g} > 2 before rescaling")
        raw_cov = np.diag(np.concatenate([[sigma_sq / 2.0], np.full(d, sigma_sq / (2.0 * d ** (2.0 / q)))]))
        scale = 0.5
        theta = scale * raw_theta
        cov = scale**2 * raw_cov
        ball = LpBall(d + 1, conjugate_exponent(q))

    model = RewardModel(theta_star=theta, covariance=cov, sampler_kind=sampler_kind)
    env = LinearBanditEnv(ball, model, rng)
    inst = LowerBoundInstance(
        xi=xi,
        epsilon=float(eps),
        construction=construction,
        theta_star=model.theta_star,
        covariance=model.covariance,
        q=float(q),
        sigma_sq=float(sigma_sq),
        scale=scale,
        horizon=int(T),
    )
    return env, inst

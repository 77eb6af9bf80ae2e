"""Bandit policies: variance-aware elimination, variance-aware explore-exploit
on lp balls, and two variance-blind baselines.

Every policy drives an ``Episode`` that charges each pull (including
variance probes) to a ``RunTrace`` and stops the run exactly at the horizon.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .design import frank_wolfe_design
from .environments import LinearBanditEnv, best_action_lp, lp_norm
from .estimation import (
    DEFAULT_STEP_CAP,
    estimate_action_variance,
    median_of_means,
    wls_from_counts,
)
from .types import FiniteActions, LpBall, RunTrace, dual_exponent

__all__ = [
    "Episode",
    "HorizonReached",
    "default_gamma",
    "default_tau",
    "run_baseline_explore_exploit",
    "run_baseline_se",
    "run_valee",
    "run_vase",
    "valee_kappa",
]

RANK_TOL = 1e-10


class HorizonReached(Exception):
    """Raised inside a policy when the step budget runs out."""


class Episode:
    """Env wrapper that records pulls and enforces the horizon.

    ``phase`` is the label attached to subsequent pulls.  A request that
    does not fit is played up to the budget and then ``HorizonReached``
    is raised, so traces always have length ``min(schedule, T)``.
    """

    def __init__(self, env: LinearBanditEnv, trace: RunTrace):
        self.env = env
        self.trace = trace
        self.phase = ""
        self._ids: dict[bytes, int] = {}
        self._gaps: dict[int, float] = {}

    @property
    def remaining(self) -> int:
        return self.trace.remaining

    def _action_id(self, action) -> tuple[object, int]:
        if isinstance(action, (int, np.integer)):
            return int(action), int(action)
        vec = np.ascontiguousarray(action, dtype=np.float64).reshape(-1)
        key = vec.tobytes()
        idx = self._ids.get(key)
        if idx is None:
            self.env.resolve(vec)
            idx = self._ids[key] = len(self.trace.action_table)
            self.trace.action_table.append(vec.copy())
        return vec, idx

    def pull_many(self, action, n: int) -> np.ndarray:
        act, idx = self._action_id(action)
        take = min(int(n), self.remaining)
        rewards = self.env.pull_many(act, take) if take > 0 else np.empty(0)
        if take > 0:
            g = self._gaps.get(idx)
            if g is None:
                g = self._gaps[idx] = self.env.gap(act)
            self.trace.record(idx, rewards, g, self.phase)
        if take < n:
            raise HorizonReached
        return rewards

    def pull(self, action) -> float:
        return float(self.pull_many(action, 1)[0])


def _new_trace(T: int, name: str, seed: int, config_hash: str) -> RunTrace:
    if int(T) < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    return RunTrace(int(T), algorithm=name, seed=seed, config_hash=config_hash)


def default_gamma(delta: float, ell: int, d: int) -> float:
    """Per-phase failure level of the variance estimates."""
    return 2.0 * delta / (ell * (ell + 1) * d * (d + 1))


def _span_coordinates(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates of the rows of ``X`` in an orthonormal basis of their span.

    Returns ``(coords, basis)`` with ``X = coords @ basis.T``.
    """
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    r = int(np.sum(s > s[0] * RANK_TOL)) if s.size and s[0] > 0 else 0
    if r == 0:
        raise ValueError("active actions are all zero")
    basis = Vt[:r].T
    return X @ basis, basis


def _run_elimination(
    env: LinearBanditEnv,
    T: int,
    delta: float,
    *,
    variance_aware: bool,
    gamma: Optional[Callable[[float, int, int], float]],
    design_iters: int,
    sr_rule: str,
    step_cap: int,
    name: str,
    seed: int,
    config_hash: str,
) -> RunTrace:
    if not isinstance(env.action_set, FiniteActions):
        raise TypeError(f"{name} needs a finite action set")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    gamma = gamma or default_gamma
    actions = env.action_set.actions
    K, d = actions.shape
    trace = _new_trace(T, name, seed, config_hash)
    ep = Episode(env, trace)
    active = np.arange(K)
    phases: list[dict] = []
    trace.info.update(phases=phases, completed_phases=0)
    ell = 0
    try:
        while True:
            ell += 1
            if active.size == 1:
                ep.phase = f"commit:{ell}"
                trace.info["committed_arm"] = int(active[0])
                ep.pull_many(int(active[0]), trace.remaining)
                break
            eps = 2.0**-ell
            delta_l = delta / (K * ell * (ell + 1))
            gamma_l = gamma(delta, ell, d)
            coords, basis = _span_coordinates(actions[active])
            r = coords.shape[1]
            design = frank_wolfe_design(coords, max_iters=design_iters)
            support = active[design.support]
            info = {
                "phase": ell,
                "eps": eps,
                "active": active.tolist(),
                "rank": r,
                "support": support.tolist(),
                "weights": design.weights.tolist(),
                "design_g": design.g,
            }
            phases.append(info)

            ep.phase = f"probe:{ell}"
            sigma_hat = np.ones(support.size)
            if variance_aware:
                for k, a in enumerate(support):
                    est = estimate_action_variance(
                        ep, int(a), eps, gamma_l, 0.5, rule=sr_rule, step_cap=step_cap
                    )
                    sigma_hat[k] = est.value
            info["sigma_hat_sq"] = sigma_hat.tolist()

            counts = np.ceil(49.0 * r / eps**2 * math.log(1.0 / delta_l) * sigma_hat * design.weights)
            counts = counts.astype(np.int64)
            info["pulls"] = counts.tolist()
            ep.phase = f"explore:{ell}"
            sums = np.zeros(support.size)
            for k, a in enumerate(support):
                sums[k] = ep.pull_many(int(a), int(counts[k])).sum()

            theta_r = wls_from_counts(coords[design.support], 1.0 / sigma_hat, counts, sums)
            est_rewards = coords @ theta_r
            keep = est_rewards >= est_rewards.max() - 2.0 * eps
            info["theta_hat"] = (basis @ theta_r).tolist()
            info["estimated_rewards"] = est_rewards.tolist()
            active = active[keep]
            if active.size == 0:
                raise RuntimeError("elimination emptied the active set")
            info["survivors"] = active.tolist()
            trace.info["completed_phases"] = ell
    except HorizonReached:
        pass
    trace.info["final_active"] = active.tolist()
    return trace


def run_vase(
    env: LinearBanditEnv,
    T: int,
    delta: float = 0.05,
    *,
    gamma: Optional[Callable[[float, int, int], float]] = None,
    design_iters: int = 1000,
    sr_rule: str = "bernstein",
    step_cap: int = DEFAULT_STEP_CAP,
    seed: int = 0,
    config_hash: str = "",
) -> RunTrace:
    """Variance-aware phased elimination over a finite action set.

    Phase ``l`` uses accuracy ``eps = 2^-l``.  It computes a G-optimal
    design on the active set (in the subspace it spans, of dimension ``r``),
    estimates each support action's reward variance with floor ``eps``,
    plays action ``a`` ``ceil(49 r / eps^2 log(1/delta_l) s2(a) pi(a))``
    times, fits weighted least squares with weights ``1 / s2(a)`` and drops
    every action whose estimated reward trails the best by more than
    ``2 eps``.  Once one action survives it is played to the horizon.

    Parameters
    ----------
    env : LinearBanditEnv
        Environment over a ``FiniteActions`` set.
    T : int
        Horizon; the trace stops exactly at ``T`` pulls.
    delta : float
        Confidence level.
    gamma : callable, optional
        ``gamma(delta, l, d)``, failure level of phase-``l`` variance
        estimates.  Defaults to ``2 delta / (l (l + 1) d (d + 1))``.

    Returns
    -------
    RunTrace
        ``info["phases"]`` lists per-phase designs, estimates and survivors.
    """
    return _run_elimination(
        env, T, delta, variance_aware=True, gamma=gamma, design_iters=design_iters,
        sr_rule=sr_rule, step_cap=step_cap, name="VASE", seed=seed, config_hash=config_hash,
    )


def run_baseline_se(
    env: LinearBanditEnv,
    T: int,
    delta: float = 0.05,
    *,
    design_iters: int = 1000,
    seed: int = 0,
    config_hash: str = "",
) -> RunTrace:
    """Variance-blind phased elimination: ``run_vase`` with every variance
    estimate replaced by 1 (no probes, unweighted least squares)."""
    return _run_elimination(
        env, T, delta, variance_aware=False, gamma=None, design_iters=design_iters,
        sr_rule="bernstein", step_cap=DEFAULT_STEP_CAP, name="BaselineSE", seed=seed,
        config_hash=config_hash,
    )


def default_tau(d: int, q: float, T: int, delta: float) -> float:
    """Variance floor balancing estimation cost against regret for unknown Σ."""
    return d ** (1.0 / 3.0 - 2.0 / (3.0 * q)) * math.log(d / delta) ** (1.0 / 3.0) / (T * q) ** (1.0 / 3.0)


def valee_kappa(d: int, T: int, delta: float) -> int:
    """Number of median-of-means blocks; ``ln T`` is floored at 1."""
    return int(math.ceil(8.0 * math.log(d * max(math.log(T), 1.0) / delta)))


def run_valee(
    env: LinearBanditEnv,
    T: int,
    delta: float = 0.05,
    known_sigma_q_sq: Optional[float] = None,
    tau: Optional[float] = None,
    *,
    sr_rule: str = "bernstein",
    step_cap: int = DEFAULT_STEP_CAP,
    seed: int = 0,
    config_hash: str = "",
) -> RunTrace:
    """Variance-aware explore-then-exploit on the unit lp ball.

    With ``known_sigma_q_sq`` absent, each basis vector's reward variance is
    first estimated with floor ``tau`` and the estimates are combined into
    ``s_q = (sum_i s_i^(q/2))^(2/q)``.  Exploration then runs doubling
    rounds ``j = 1, 2, ...`` with norm guess ``N_j = 2^(1-j)`` and accuracy
    ``eps_j = alpha sqrt(N_j)``, ``alpha = (d kappa / (T q s_q))^(1/4)``.
    Each round plays ``kappa`` blocks of ``ceil(8 / eps_j^2)`` pulls of every
    basis vector and takes coordinate-wise medians of the block means.
    Rounds stop once ``N_j < ||theta_hat||_q``; the rest of the horizon plays
    the dual-norm maximiser of ``theta_hat`` (``e_1`` if it is zero).

    Returns
    -------
    RunTrace
        ``info`` holds ``kappa``, ``alpha``, ``sigma_q_sq_hat``, the list of
        ``rounds`` and ``exploit_reached``.
    """
    aset = env.action_set
    if not isinstance(aset, LpBall):
        raise TypeError("VALEE needs an lp-ball action set")
    q = dual_exponent(aset.p)
    d = aset.d
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    trace = _new_trace(T, "VALEE", seed, config_hash)
    ep = Episode(env, trace)
    basis = np.eye(d)
    kappa = valee_kappa(d, T, delta)
    info = trace.info
    rounds: list[dict] = []
    info.update(kappa=kappa, rounds=rounds, exploit_reached=False, q=q, sigma_q_sq_hat=None, alpha=None)
    try:
        if known_sigma_q_sq is not None:
            if known_sigma_q_sq < 0:
                raise ValueError("known_sigma_q_sq must be >= 0")
            s_q = float(known_sigma_q_sq)
        else:
            if tau is None:
                tau = default_tau(d, q, T, delta)
            if not tau > 0:
                raise ValueError(f"tau must be > 0, got {tau}")
            info["tau"] = tau
            ep.phase = "variance"
            s = np.empty(d)
            for i in range(d):
                s[i] = estimate_action_variance(
                    ep, basis[i], tau, delta / d, 0.5, rule=sr_rule, step_cap=step_cap
                ).value
            info["variance_estimates"] = s.tolist()
            s_q = float(np.sum(s ** (q / 2.0)) ** (2.0 / q))
        info["sigma_q_sq_hat"] = s_q
        alpha = (d * kappa / (T * q * s_q)) ** 0.25 if s_q > 0 else math.inf
        info["alpha"] = alpha

        j = 0
        n_hat = 2.0
        norm = 0.0
        theta_hat = np.zeros(d)
        while n_hat >= norm:
            j += 1
            n_hat /= 2.0
            eps_j = alpha * math.sqrt(n_hat)
            t_exp = max(1, int(math.ceil(8.0 / eps_j**2))) if eps_j > 0 else trace.remaining + 1
            rnd = {"round": j, "n_hat": n_hat, "eps_hat": eps_j, "pulls_per_block": t_exp}
            rounds.append(rnd)
            ep.phase = f"explore:{j}"
            blocks = np.empty((kappa, d))
            for b in range(kappa):
                for i in range(d):
                    blocks[b, i] = ep.pull_many(basis[i], t_exp).mean()
            theta_hat = np.array([median_of_means(blocks[:, i]) for i in range(d)])
            norm = float(lp_norm(theta_hat, q))
            rnd["theta_hat"] = theta_hat.tolist()
            rnd["norm"] = norm

        info["n_hat_final"] = n_hat
        info["theta_hat"] = theta_hat.tolist()
        a_hat = best_action_lp(theta_hat, q) if norm > 0 else basis[0]
        info["exploit_action"] = a_hat.tolist()
        info["exploit_reached"] = True
        ep.phase = "exploit"
        ep.pull_many(a_hat, trace.remaining)
    except HorizonReached:
        pass
    return trace


def run_baseline_explore_exploit(
    env: LinearBanditEnv,
    T: int,
    M: int,
    *,
    seed: int = 0,
    config_hash: str = "",
) -> RunTrace:
    """Fixed-budget explore-then-commit.

    Plays each listed action (finite set) or each basis vector (ball) ``M``
    times, then commits to the empirical best action, or on a ball to the
    dual-norm maximiser of the per-coordinate sample means.
    """
    if int(M) < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    M = int(M)
    trace = _new_trace(T, "BaselineEE", seed, config_hash)
    ep = Episode(env, trace)
    aset = env.action_set
    trace.info.update(M=M, committed=False)
    try:
        ep.phase = "explore"
        if isinstance(aset, FiniteActions):
            means = np.array([ep.pull_many(k, M).mean() for k in range(aset.K)])
            choice = int(np.argmax(means))
            trace.info["committed_arm"] = choice
        else:
            basis = np.eye(aset.d)
            theta_hat = np.array([ep.pull_many(basis[i], M).mean() for i in range(aset.d)])
            trace.info["theta_hat"] = theta_hat.tolist()
            choice = best_action_lp(theta_hat, aset.q) if np.any(theta_hat) else basis[0]
        trace.info["committed"] = True
        ep.phase = "commit"
        ep.pull_many(choice, trace.remaining)
    except HorizonReached:
        pass
    return trace

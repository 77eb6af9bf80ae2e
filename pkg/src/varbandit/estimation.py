"""Sequential and batch estimators used by the bandit policies.

* ``stopping_rule_estimate``: multiplicative-error mean estimate of a
  [0, 1]-valued variable by sampling until the running sum crosses a
  threshold.
* ``variance_probe`` / ``estimate_action_variance``: the floored
  squared-difference probe of an action's reward variance and its
  stopping-rule wrapper.
* ``median_of_means`` and ``weighted_least_squares``.

Anything exposing ``pull_many(action, n) -> rewards`` works as an env handle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .design import guarded_inverse

__all__ = [
    "DEFAULT_STEP_CAP",
    "SrResult",
    "StepCapError",
    "VarianceEstimate",
    "WlsObservation",
    "estimate_action_variance",
    "median_of_means",
    "sr_threshold",
    "stopping_rule_estimate",
    "variance_probe",
    "variance_probe_sample",
    "weighted_least_squares",
    "wls_from_counts",
]

DEFAULT_STEP_CAP = 10**9


class StepCapError(RuntimeError):
    """The stopping rule hit its sample cap; the mean is probably ~0."""


@dataclass(frozen=True)
class SrResult:
    estimate: float
    steps: int


@dataclass(frozen=True)
class VarianceEstimate:
    value: float
    steps: int


@dataclass(frozen=True)
class WlsObservation:
    action: np.ndarray
    weight: float
    reward: float

    def __post_init__(self):
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"weight must be finite and > 0, got {self.weight}")


def sr_threshold(eps: float, delta: float, rule: str = "bernstein") -> float:
    """Running-sum threshold of the stopping rule.

    ``"bernstein"``: ``(1 + eps)(2 + 2 eps / 3) ln(2 / delta) / eps^2``.  For
    X in [0, 1] the variance is at most the mean, and Bernstein's inequality
    bounds each side of the relative error by ``delta / 2``.

    ``"dagum"``: the classical ``1 + (1 + eps) 4 (e - 2) ln(2 / delta) / eps^2``
    of Dagum, Karp, Luby and Ross, about 25% more samples.
    """
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    log_term = math.log(2.0 / delta)
    if rule == "bernstein":
        return (1.0 + eps) * (2.0 + 2.0 * eps / 3.0) * log_term / eps**2
    if rule == "dagum":
        return 1.0 + (1.0 + eps) * 4.0 * (math.e - 2.0) * log_term / eps**2
    raise ValueError(f"unknown threshold rule {rule!r}")


def stopping_rule_estimate(
    sampler: Callable[[int], np.ndarray],
    eps: float,
    delta: float,
    rule: str = "bernstein",
    step_cap: int = DEFAULT_STEP_CAP,
) -> SrResult:
    """Estimate ``mu = E[X] > 0`` to relative error ``eps`` w.p. ``1 - delta``.

    Draws until the running sum ``S_N`` reaches the threshold ``Y`` and
    returns ``Y / N``.  Draws are requested in batches of ``ceil(Y - S)``:
    since every draw is at most 1 the sum cannot reach ``Y`` before the last
    draw of a batch, so no sample beyond the stopping time is consumed.

    Parameters
    ----------
    sampler : callable
        ``sampler(n)`` returns ``n`` i.i.d. draws in [0, 1].
    eps, delta : float
        Relative accuracy and failure probability, both in (0, 1).
    rule : {"bernstein", "dagum"}
        Threshold choice, see ``sr_threshold``.
    step_cap : int
        Hard limit on draws; exceeding it raises ``StepCapError``.
    """
    upsilon = sr_threshold(eps, delta, rule)
    total = 0.0
    steps = 0
    while True:
        need = max(int(math.ceil(upsilon - total)), 1)
        if steps + need > step_cap:
            raise StepCapError(
                f"stopping rule reached its cap of {step_cap} samples (sum {total:.4g} < {upsilon:.4g}); "
                "the mean is probably zero"
            )
        x = np.asarray(sampler(need), dtype=np.float64).reshape(-1)
        if x.size != need:
            raise ValueError(f"sampler returned {x.size} draws, expected {need}")
        if np.any((x < 0.0) | (x > 1.0)) or not np.all(np.isfinite(x)):
            raise ValueError("stopping rule samples must lie in [0, 1]")
        steps += need
        total += float(x.sum())
        if total >= upsilon:
            return SrResult(estimate=upsilon / steps, steps=steps)


def variance_probe(env, action, tau: float, n: int) -> np.ndarray:
    """``n`` probes ``max(((X - X') / 2)^2, tau / 2)`` from ``2 n`` pulls."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    x = np.asarray(env.pull_many(action, 2 * n), dtype=np.float64).reshape(n, 2)
    return np.maximum(0.25 * (x[:, 0] - x[:, 1]) ** 2, 0.5 * tau)


def variance_probe_sample(env, action, tau: float) -> float:
    """A single probe; consumes exactly two pulls of ``action``."""
    return float(variance_probe(env, action, tau, 1)[0])


def estimate_action_variance(
    env,
    action,
    tau: float,
    delta_bar: float,
    eps_bar: float = 0.5,
    rule: str = "bernstein",
    step_cap: int = DEFAULT_STEP_CAP,
) -> VarianceEstimate:
    """Stopping-rule estimate of the mean variance probe of ``action``.

    The probe has mean between ``max(tau, s2) / 2`` and ``(s2 + tau) / 2``
    where ``s2`` is the reward variance, so with ``eps_bar = 1/2`` the result
    lies in ``[max(tau, s2) / 4, 3 (s2 + tau) / 4]`` w.p. ``1 - delta_bar``.
    ``steps`` counts bandit pulls (two per probe).
    """
    res = stopping_rule_estimate(
        lambda n: variance_probe(env, action, tau, n), eps_bar, delta_bar, rule=rule, step_cap=step_cap
    )
    return VarianceEstimate(value=res.estimate, steps=2 * res.steps)


def median_of_means(block_means) -> float:
    """Median of block means; the lower median when the count is even."""
    x = np.sort(np.asarray(block_means, dtype=np.float64).reshape(-1))
    if x.size == 0:
        raise ValueError("median_of_means needs at least one block")
    return float(x[(x.size - 1) // 2])


def weighted_least_squares(observations: Sequence[WlsObservation]) -> np.ndarray:
    """``V^{-1} sum_s w_s a_s X_s`` with ``V = sum_s w_s a_s a_s^T``.

    Raises ``SingularDesignError`` when ``V`` is singular.
    """
    if len(observations) == 0:
        raise ValueError("no observations")
    A = np.array([np.atleast_1d(np.asarray(o.action, dtype=np.float64)) for o in observations])
    w = np.array([o.weight for o in observations], dtype=np.float64)
    x = np.array([o.reward for o in observations], dtype=np.float64)
    V = (A.T * w) @ A
    return guarded_inverse(V) @ (A.T @ (w * x))


def wls_from_counts(actions, weights, counts, reward_sums) -> np.ndarray:
    """Weighted least squares from per-action aggregates.

    Action ``k`` was played ``counts[k]`` times with per-pull weight
    ``weights[k]`` and summed reward ``reward_sums[k]``; the result equals
    ``weighted_least_squares`` on the individual pulls.
    """
    A = np.asarray(actions, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64) * np.asarray(counts, dtype=np.float64)
    V = (A.T * w) @ A
    b = A.T @ (np.asarray(weights, dtype=np.float64) * np.asarray(reward_sums, dtype=np.float64))
    return guarded_inverse(V) @ b

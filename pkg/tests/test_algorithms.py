import math

import numpy as np
import pytest

from varbandit.algorithms import (
    default_tau,
    run_baseline_explore_exploit,
    run_baseline_se,
    run_valee,
    run_vase,
    valee_kappa,
)
from varbandit.environments import LinearBanditEnv, best_action_lp, lp_norm, random_unit_actions
from varbandit.types import FiniteActions, LpBall, RewardModel, SamplerKind, derive_rng_stream


def finite_env(actions, theta, cov, seed=0, kind=SamplerKind.GAUSSIAN_REJECTION):
    return LinearBanditEnv(FiniteActions(actions), RewardModel(theta, cov, kind), derive_rng_stream(seed, 0))


def ball_env(theta, cov, p=2.0, seed=0, run=0):
    theta = np.asarray(theta, dtype=float)
    return LinearBanditEnv(LpBall(theta.size, p), RewardModel(theta, cov), derive_rng_stream(seed, run))


def scalar_instance(kind=SamplerKind.POINT_MASS):
    return finite_env([[1.0], [0.5]], [0.8], 0.0, kind=kind)


def elimination_phase(trace, arm):
    for info in trace.info["phases"]:
        if arm in info["active"] and arm not in info.get("survivors", [arm]):
            return info["phase"]
    return None


K20 = random_unit_actions(20, 4, np.random.default_rng(0))
THETA20 = 0.5 * random_unit_actions(1, 4, np.random.default_rng(1))[0]


def phase_steps(trace, phases):
    return sum(trace.steps_in(f"probe:{l}") + trace.steps_in(f"explore:{l}") for l in phases)


class TestVase:
    def test_scalar_elimination(self):
        trace = run_vase(scalar_instance(), 10**5, 0.05)
        assert len(trace) == 10**5
        phase = elimination_phase(trace, 1)
        assert phase is not None and phase <= 6
        assert trace.info["final_active"] == [0]

    def test_tiny_budget(self):
        trace = run_vase(scalar_instance(), 3, 0.05)
        assert len(trace) == 3
        assert trace.cum_regret[-1] <= 2 * 3

    def test_probe_steps_charged(self):
        trace = run_vase(finite_env(K20, THETA20, 0.01), 20_000, 0.05)
        probes = trace.steps_in("probe:")
        assert probes > 0
        assert probes + trace.steps_in("explore:") + trace.steps_in("commit:") == len(trace) == 20_000
        mask = np.array([p.startswith("probe:") for p in trace.phases])
        assert np.all(trace.gaps[mask] >= 0)

    def test_phase_structure(self):
        env = finite_env(K20, THETA20, 0.01, seed=2)
        trace = run_vase(env, 2**17, 0.05)
        prev = set(range(20))
        for info in trace.info["phases"]:
            assert set(info["active"]) <= prev
            prev = set(info.get("survivors", info["active"]))
            assert prev
            eps = info["eps"]
            if "estimated_rewards" in info:
                est = np.array(info["estimated_rewards"])
                keep = est >= est.max() - 2 * eps
                assert [a for a, k in zip(info["active"], keep) if k] == info["survivors"]
            if "pulls" in info:
                K, d = 20, 4
                ell = info["phase"]
                delta_l = 0.05 / (K * ell * (ell + 1))
                expect = np.ceil(49 * info["rank"] / eps**2 * math.log(1 / delta_l)
                                 * np.array(info["sigma_hat_sq"]) * np.array(info["weights"]))
                np.testing.assert_array_equal(info["pulls"], expect)

    def test_variance_dependence(self):
        small, large = [], []
        for s in range(20):
            small.append(run_vase(finite_env(K20, THETA20, 0.01, seed=s), 2**16, 0.05).regret)
            large.append(run_vase(finite_env(K20, THETA20, 0.64, seed=s), 2**16, 0.05).regret)
        assert np.mean(small) < np.mean(large)

    def test_good_events(self):
        # optimal arm never eliminated; survivors' estimates within eps
        env_theta = THETA20
        best = int(np.argmax(K20 @ env_theta))
        kept, accurate, n = 0, 0, 30
        for s in range(n):
            trace = run_vase(finite_env(K20, env_theta, 0.01, seed=100 + s), 2**16, 0.1)
            ok_keep, ok_acc = True, True
            for info in trace.info["phases"]:
                if "survivors" not in info:
                    continue
                ok_keep &= best in info["survivors"]
                if info["phase"] >= 2:
                    err = K20[info["active"]] @ (np.array(info["theta_hat"]) - env_theta)
                    ok_acc &= bool(np.abs(err).max() <= info["eps"])
            kept += ok_keep
            accurate += ok_acc
        assert kept / n >= 1 - 3 * 0.1
        assert accurate / n >= 1 - 0.1

    def test_rank_deficient_actions(self):
        # actions span a plane inside R^3
        A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0], [-0.6, 0.8, 0.0]])
        trace = run_vase(finite_env(A, [0.5, 0.2, 0.3], 0.0, kind=SamplerKind.POINT_MASS), 50_000, 0.05)
        assert trace.info["phases"][0]["rank"] == 2
        assert 0 in trace.info["final_active"] and 3 not in trace.info["final_active"]

    def test_deterministic(self):
        a = run_vase(finite_env(K20, THETA20, 0.04, seed=9), 5000, 0.05)
        b = run_vase(finite_env(K20, THETA20, 0.04, seed=9), 5000, 0.05)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(a.actions, b.actions)

    def test_prefix_consistent(self):
        # the policy never reads T, so shorter runs are prefixes of longer ones
        a = run_vase(finite_env(K20, THETA20, 0.04, seed=4), 3000, 0.05)
        b = run_vase(finite_env(K20, THETA20, 0.04, seed=4), 9000, 0.05)
        np.testing.assert_array_equal(a.gaps, b.gaps[:3000])

    def test_ball_rejected(self):
        with pytest.raises(TypeError):
            run_vase(ball_env([0.1, 0.1], 0.0), 10, 0.05)


class TestBaselineSe:
    def test_scalar_elimination(self):
        trace = run_baseline_se(scalar_instance(), 10**5, 0.05)
        phase = elimination_phase(trace, 1)
        assert phase is not None and phase <= 6
        assert trace.steps_in("probe:") == 0

    def test_explores_longer_than_vase(self):
        vase, se = [], []
        for s in range(20):
            vase.append(phase_steps(run_vase(finite_env(K20, THETA20, 0.0025, seed=s), 2**16, 0.05), (1, 2)))
            se.append(phase_steps(run_baseline_se(finite_env(K20, THETA20, 0.0025, seed=s), 2**16, 0.05), (1, 2)))
        assert np.mean(se) > np.mean(vase)

    def test_large_variance_still_not_longer_than_baseline(self):
        # bounded rewards keep every variance estimate below 1
        vase = phase_steps(run_vase(finite_env(K20, THETA20, 1.0, seed=1), 2**16, 0.05), (1, 2))
        se = phase_steps(run_baseline_se(finite_env(K20, THETA20, 1.0, seed=1), 2**16, 0.05), (1, 2))
        assert vase <= se


class TestValee:
    def test_exploit_gap_bound(self):
        theta = np.array([0.6, 0.0])
        s_q = 0.0002
        hits, n = 0, 100
        for s in range(n):
            trace = run_valee(ball_env(theta, 0.0001 * np.eye(2), seed=1, run=s), 2**16, 0.05, known_sigma_q_sq=s_q)
            assert trace.info["exploit_reached"]
            eps_l = trace.info["rounds"][-1]["eps_hat"]
            a_hat = np.array(trace.info["exploit_action"])
            gap = lp_norm(theta, 2) - a_hat @ theta
            hits += gap <= 3 * (2 - 1) * s_q * eps_l**2 / lp_norm(theta, 2)
        assert hits / n >= 1 - 2 * 0.05

    def test_zero_theta_never_stops(self):
        trace = run_valee(ball_env([0.0, 0.0], 0.01 * np.eye(2)), 20_000, 0.05, known_sigma_q_sq=0.02)
        assert len(trace) == 20_000
        assert trace.cum_regret[-1] == 0.0
        assert not trace.info["exploit_reached"]

    def test_exploit_action_unit_norm(self):
        for p in (1.25, 1.5, 2.0):
            q = p / (p - 1)
            theta = np.array([0.3, -0.2, 0.1])
            trace = run_valee(ball_env(theta, 0.001 * np.eye(3), p=p), 2**15, 0.05, known_sigma_q_sq=0.003)
            assert trace.info["exploit_reached"]
            a = np.array(trace.info["exploit_action"])
            assert lp_norm(a, p) == pytest.approx(1.0, abs=1e-9)
            np.testing.assert_allclose(a, best_action_lp(trace.info["theta_hat"], q))

    def test_round_schedule(self):
        trace = run_valee(ball_env([0.6, 0.0], 0.02 * np.eye(2)), 2**16, 0.05, known_sigma_q_sq=0.04)
        info = trace.info
        assert info["kappa"] == valee_kappa(2, 2**16, 0.05) == math.ceil(8 * math.log(2 * math.log(2**16) / 0.05))
        assert info["alpha"] == pytest.approx((2 * info["kappa"] / (2**16 * 2 * 0.04)) ** 0.25)
        for j, rnd in enumerate(info["rounds"], start=1):
            assert rnd["n_hat"] == 2.0 ** (1 - j)
            assert rnd["pulls_per_block"] == max(1, math.ceil(8 / rnd["eps_hat"] ** 2))
        *early, last = info["rounds"]
        assert all(r["n_hat"] >= r["norm"] for r in early)
        assert last["n_hat"] < last["norm"]
        explore = sum(2 * info["kappa"] * r["pulls_per_block"] for r in info["rounds"])
        assert trace.steps_in("explore:") == explore
        assert trace.steps_in("exploit") == 2**16 - explore

    def test_unknown_covariance(self):
        T = 2**16
        trace = run_valee(ball_env([0.6, 0.0], 0.02 * np.eye(2)), T, 0.05)
        info = trace.info
        assert info["tau"] == pytest.approx(default_tau(2, 2.0, T, 0.05))
        assert info["tau"] == pytest.approx(math.log(2 / 0.05) ** (1 / 3) / (2 * T) ** (1 / 3))
        s = np.array(info["variance_estimates"])
        assert np.all(s >= info["tau"] / 4)
        assert info["sigma_q_sq_hat"] == pytest.approx(s.sum())
        assert trace.steps_in("variance") > 0

    def test_budget_exhausted(self):
        trace = run_valee(ball_env([0.6, 0.0], 0.02 * np.eye(2)), 500, 0.05, known_sigma_q_sq=0.04)
        assert len(trace) == 500
        assert not trace.info["exploit_reached"]

    def test_variance_scaling(self):
        regrets = {}
        for s2 in (0.0004, 0.04):
            regrets[s2] = np.mean([
                run_valee(ball_env([0.6, 0.0], s2 / 2 * np.eye(2), seed=3, run=s), 2**16, 0.05,
                          known_sigma_q_sq=s2).regret
                for s in range(20)
            ])
        ratio = regrets[0.0004] / regrets[0.04]
        assert 0.1 / 3 <= ratio <= 0.1 * 3

    def test_requires_ball(self):
        with pytest.raises(TypeError):
            run_valee(scalar_instance(), 100, 0.05)
        with pytest.raises(ValueError):
            run_valee(ball_env([0.1, 0.1, 0.1], 0.0, p=3.0), 100, 0.05)


class TestBaselineExploreExploit:
    def test_finite_commit(self):
        env = finite_env(np.eye(2), [0.5, 0.0], 0.0, kind=SamplerKind.POINT_MASS)
        trace = run_baseline_explore_exploit(env, 100, 1)
        assert trace.info["committed_arm"] == 0
        assert trace.regret == pytest.approx(0.5)

    def test_rejects_zero_budget(self):
        with pytest.raises(ValueError):
            run_baseline_explore_exploit(scalar_instance(), 100, 0)

    def test_truncated_exploration(self):
        env = finite_env(np.eye(2), [0.5, 0.0], 0.0, kind=SamplerKind.POINT_MASS)
        trace = run_baseline_explore_exploit(env, 15, 10)
        assert len(trace) == 15 and not trace.info["committed"]

    def test_ball_commit(self):
        env = ball_env([0.6, 0.0], 0.0)
        trace = run_baseline_explore_exploit(env, 1000, 5)
        assert trace.regret == pytest.approx(5 * 0.6)
        np.testing.assert_allclose(trace.action_table[trace.actions[-1]], [1.0, 0.0])

    def test_ball_slope(self):
        from varbandit.harness import default_explore_budget, fit_loglog_slope

        pts = []
        for T in (2**12, 2**13, 2**14, 2**15, 2**16):
            M = default_explore_budget(T, 2)
            r = [run_baseline_explore_exploit(ball_env([0.6, 0.0], 0.02 * np.eye(2), run=s), T, M).regret
                 for s in range(10)]
            pts.append((T, np.mean(r)))
        assert 0.55 <= fit_loglog_slope(pts) <= 0.8

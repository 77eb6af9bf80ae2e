import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varbandit.design import (
    CoverTooLargeError,
    SingularDesignError,
    discretize_lp_ball,
    frank_wolfe_design,
    g_value,
    greedy_spanning_subset,
    guarded_inverse,
    info_matrix,
)
from varbandit.environments import lp_norm
from varbandit.types import Design


def simplex_grid(K, step):
    """All weight vectors on the K-simplex with the given resolution."""
    n = int(round(1 / step))
    for combo in itertools.combinations(range(n + K - 1), K - 1):
        bars = (-1,) + combo + (n + K - 1,)
        yield np.diff(bars) - 1


def brute_force_g(A, step=0.01):
    """Minimum g over a weight-simplex grid (independent oracle)."""
    W = np.array(list(simplex_grid(A.shape[0], step)), dtype=float) * step
    V = np.einsum("wk,ki,kj->wij", W, A, A)
    det = np.linalg.det(V)
    ok = det > 1e-12
    Vinv = np.linalg.inv(V[ok])
    g = np.einsum("ki,wij,kj->wk", A, Vinv, A).max(axis=1)
    return g.min()


def multiplicative_d_optimal(A, iters=20000):
    """Titterington's multiplicative update, a second route to the optimum."""
    K, d = A.shape
    pi = np.full(K, 1.0 / K)
    for _ in range(iters):
        lev = np.einsum("ij,jk,ik->i", A, np.linalg.inv((A.T * pi) @ A), A)
        pi *= lev / d
    return pi


class TestGValue:
    def test_uniform_basis(self):
        d = Design(support=[0, 1, 2], weights=np.full(3, 1 / 3))
        assert g_value(d, np.eye(3)) == pytest.approx(3.0, abs=1e-12)

    def test_single_action_query(self):
        A = np.array([[1.0, 0.0], [0.0, 1.0]])
        d = Design(support=[0], weights=[1.0])
        assert g_value(d, A, query=[[1.0, 0.0]]) == pytest.approx(1.0)

    def test_singular_carries_deficiency(self):
        d = Design(support=[0], weights=[1.0])
        with pytest.raises(SingularDesignError) as info:
            g_value(d, np.eye(3))
        assert info.value.rank_deficiency == 2

    def test_matches_brute_force_k10(self):
        A = np.random.default_rng(3).standard_normal((10, 2))
        design = frank_wolfe_design(A, target_g=2.0 + 1e-5, max_iters=20000)
        oracle = multiplicative_d_optimal(A)
        g_oracle = g_value(Design.from_dense(oracle, prune_eps=1e-12), A)
        assert design.g == pytest.approx(g_oracle, abs=1e-3)


class TestFrankWolfe:
    @pytest.mark.parametrize("d", [1, 2, 3, 5])
    def test_basis_uniform(self, d):
        design = frank_wolfe_design(np.eye(d), target_g=2 * d)
        np.testing.assert_allclose(design.dense(d), np.full(d, 1 / d), atol=1e-12)
        assert design.g == pytest.approx(d, abs=1e-6)

    def test_scalar_actions(self):
        design = frank_wolfe_design([1.0, 0.5], target_g=2)
        np.testing.assert_array_equal(design.support, [0])
        assert design.g == pytest.approx(1.0)

    def test_scalar_brute_force(self):
        # V(pi) = pi + 0.25 (1 - pi) is maximised at pi = 1
        grid = np.linspace(0, 1, 101)
        g = np.maximum(1.0 / (grid + 0.25 * (1 - grid)), 0.25 / (grid + 0.25 * (1 - grid)))
        assert grid[np.argmin(g)] == 1.0 and g.min() == 1.0

    def test_random_large_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            A = rng.standard_normal((40, 6))
            design = frank_wolfe_design(A)
            assert design.converged
            assert design.g <= 12.0

    def test_history_non_increasing(self):
        A = np.random.default_rng(1).standard_normal((30, 4))
        design = frank_wolfe_design(A, target_g=4.01, max_iters=500)
        assert np.all(np.diff(design.history) <= 1e-9)
        assert design.history[-1] == pytest.approx(design.g, rel=1e-4)

    def test_support_bound(self):
        A = np.random.default_rng(2).standard_normal((25, 3))
        design = frank_wolfe_design(A, target_g=3.05)
        assert len(design) <= min(25, design.iterations + 3)

    @pytest.mark.parametrize("seed", range(6))
    def test_small_sets_match_simplex_grid(self, seed):
        rng = np.random.default_rng(100 + seed)
        K = int(rng.integers(2, 5))
        A = rng.standard_normal((K, 2))
        design = frank_wolfe_design(A, target_g=2.0 + 1e-6, max_iters=5000)
        assert design.g == pytest.approx(brute_force_g(A), abs=2e-2)

    def test_target_below_optimum_rejected(self):
        with pytest.raises(ValueError):
            frank_wolfe_design(np.eye(3), target_g=2.5)

    def test_non_spanning(self):
        with pytest.raises(SingularDesignError) as info:
            frank_wolfe_design([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]])
        assert info.value.rank_deficiency == 2

    def test_not_converged_flag(self):
        A = np.random.default_rng(5).standard_normal((40, 6))
        design = frank_wolfe_design(A, target_g=6.0, max_iters=3)
        assert not design.converged
        assert design.iterations == 3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 5), st.integers(0, 10_000))
    def test_kiefer_wolfowitz_floor(self, d, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((d + 6, d))
        design = frank_wolfe_design(A)
        assert d - 1e-6 <= design.g <= 2 * d
        # any other design is no better than d either
        pi = rng.dirichlet(np.ones(d + 6))
        assert g_value(Design.from_dense(pi), A) >= d - 1e-6


class TestHelpers:
    def test_guarded_inverse(self):
        V = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(guarded_inverse(V), np.linalg.inv(V), atol=1e-12)
        with pytest.raises(SingularDesignError):
            guarded_inverse(np.diag([1.0, 1e-14]))

    def test_info_matrix_psd_symmetric(self):
        A = np.random.default_rng(0).standard_normal((8, 3))
        V = info_matrix(A, np.full(8, 1 / 8))
        assert np.abs(V - V.T).max() <= 1e-10
        assert np.linalg.eigvalsh(V).min() >= -1e-9

    def test_greedy_subset_spans(self):
        A = np.random.default_rng(0).standard_normal((12, 4))
        idx = greedy_spanning_subset(A)
        assert np.linalg.matrix_rank(A[idx]) == 4
        assert idx[0] == np.argmax(np.linalg.norm(A, axis=1))


class TestDiscretize:
    def test_one_dimension(self):
        np.testing.assert_array_equal(discretize_lp_ball(1, 1.5, 0.1), [[-1.0], [1.0]])

    def test_circle_count(self):
        P = discretize_lp_ball(2, 2.0, 0.1)
        assert len(P) >= math.ceil(2 * math.pi / (2 * math.asin(0.05)))
        np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("d,p,eps", [(2, 2.0, 0.1), (2, 1.5, 0.05), (3, 2.0, 0.3), (3, 1.25, 0.3), (3, 4.0, 0.3)])
    def test_cover_and_feasible(self, d, p, eps):
        P = discretize_lp_ball(d, p, eps)
        assert np.all(lp_norm(P, p, axis=1) <= 1 + 1e-12)
        x = np.random.default_rng(0).standard_normal((2000, d))
        x /= lp_norm(x, p, axis=1)[:, None]
        dist = np.sqrt(((x[:, None, :] - P[None, :, :]) ** 2).sum(-1)).min(axis=1)
        assert dist.max() <= eps

    def test_cap(self):
        with pytest.raises(CoverTooLargeError) as info:
            discretize_lp_ball(8, 2.0, 0.01, cap=1000)
        assert info.value.count > 1000

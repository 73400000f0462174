import math
from statistics import NormalDist

import numpy as np
import pytest

from nvmix.distribution import (
    BoxIntegrand,
    Hyperrectangle,
    integrand_g,
    prob,
    prob_singular,
    reorder,
)
from nvmix.linalg import singular_cholesky
from nvmix.mixtures import constant, inverse_gamma, pareto
from nvmix.model import NvmModel
from nvmix.rqmc import RqmcConfig

INF = float("inf")


def normal_model(sigma, loc=None):
    sigma = np.asarray(sigma, dtype=float)
    return NvmModel.build(loc, sigma, constant(), [1.0])


def mvt_model(nu, sigma, loc=None):
    return NvmModel.build(loc, sigma, inverse_gamma(), [nu])


def orthant_2d(rho):
    """Centered bivariate elliptical orthant probability P(X1<=0, X2<=0)."""
    return 0.25 + math.asin(rho) / (2.0 * math.pi)


class TestHyperrectangle:
    def test_valid(self):
        Hyperrectangle([-INF, 0.0], [0.0, 1.0])

    def test_rejects_touching(self):
        with pytest.raises(ValueError):
            Hyperrectangle([0.0, 0.0], [1.0, 0.0])


class TestReorder:
    def test_smallest_range_first(self):
        # Phi(0.1) ~ 0.540 < Phi(5) ~ 1, so the 0.1-limit variable leads.
        res = reorder([-INF, -INF], [5.0, 0.1], np.eye(2), mu_sqrt_w=1.0)
        assert list(res.perm) == [1, 0]
        assert np.allclose(res.b, [0.1, 5.0])

        res2 = reorder([-INF, -INF], [0.1, 5.0], np.eye(2), mu_sqrt_w=1.0)
        assert list(res2.perm) == [0, 1]

    def test_d1_identity(self):
        res = reorder([-1.0], [1.0], np.array([[2.0]]), mu_sqrt_w=1.3)
        assert list(res.perm) == [0]
        assert res.factor.C[0, 0] == pytest.approx(math.sqrt(2.0))

    def test_factor_matches_permuted_cholesky(self):
        rng = np.random.default_rng(5)
        G = rng.standard_normal((4, 6))
        sigma = G @ G.T
        b = rng.uniform(0.5, 3.0, size=4)
        res = reorder(np.full(4, -INF), b, sigma, mu_sqrt_w=1.0)
        sig_perm = sigma[np.ix_(res.perm, res.perm)]
        assert np.allclose(res.factor.C @ res.factor.C.T, sig_perm, atol=1e-10)

    def test_finite_limits(self):
        res = reorder([-1.0, -2.0], [1.0, 2.0], np.eye(2), mu_sqrt_w=1.0)
        assert sorted(res.perm) == [0, 1]


class TestIntegrandG:
    def test_d1_half(self):
        res = reorder([-INF], [0.0], np.eye(1), 1.0)
        for u in ([0.3], [0.7]):
            assert integrand_g(np.array(u), res, constant(), [1.0]) == pytest.approx(0.5)

    def test_d2_independent(self):
        res = reorder([-INF, -INF], [0.0, 0.0], np.eye(2), 1.0)
        rng = np.random.default_rng(0)
        u = rng.random((50, 2))
        vals = integrand_g(u, res, constant(), [1.0])
        assert np.allclose(vals, 0.25, atol=1e-14)

    def test_correlated_matches_scalar_recursion(self):
        # Independent scalar oracle using the stdlib normal distribution.
        nd = NormalDist()
        sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
        b = np.array([0.4, -0.3])
        res = reorder([-INF, -INF], b, sigma, 1.0)

        def scalar_oracle(u1):
            C11 = math.sqrt(sigma[res.perm[0], res.perm[0]])
            b1, b2 = res.b
            C = res.factor.C
            e1 = nd.cdf(b1 / C[0, 0])
            z = nd.inv_cdf(u1 * e1)
            e2 = nd.cdf((b2 - C[1, 0] * z) / C[1, 1])
            return e1 * e2

        for u1 in (0.2, 0.5, 0.9):
            got = integrand_g(np.array([0.5, u1]), res, constant(), [1.0])
            assert got == pytest.approx(scalar_oracle(u1), rel=1e-9)

    def test_mixing_coordinate_changes_value(self):
        res = reorder([-INF, -INF], [0.0, 1.0], np.eye(2), 1.0)
        v1 = integrand_g(np.array([0.1, 0.5]), res, inverse_gamma(), [3.0])
        v2 = integrand_g(np.array([0.9, 0.5]), res, inverse_gamma(), [3.0])
        assert v1 != v2


class TestProb:
    def test_normal_quadrant(self):
        res = prob([-INF, -INF], [0.0, 0.0], normal_model(np.eye(2)), seed=1)
        assert res.converged
        assert res.estimate == pytest.approx(0.25, abs=1e-3)

    @pytest.mark.parametrize("nu", [1.0, 4.0])
    def test_mvt_orthant_oracle(self, nu):
        sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
        res = prob([-INF, -INF], [0.0, 0.0], mvt_model(nu, sigma), seed=2)
        assert res.converged
        assert res.estimate == pytest.approx(orthant_2d(0.5), abs=1e-3)
        assert res.estimate == pytest.approx(1.0 / 3.0, abs=1.5e-3)

    def test_mvt_d1_median(self):
        res = prob([-INF], [0.0], mvt_model(2.0, np.eye(1)), seed=3)
        assert res.estimate == pytest.approx(0.5, abs=1e-3)

    def test_pareto_mixture_orthant(self):
        # The orthant probability is mixing-free for centered ellipticals.
        sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
        model = NvmModel.build(None, sigma, pareto(), [1.5])
        res = prob([-INF, -INF], [0.0, 0.0], model, seed=4)
        assert res.estimate == pytest.approx(1.0 / 3.0, abs=1.5e-3)

    def test_location_shift(self):
        mu = np.array([5.0, -3.0])
        res = prob(mu - 10, mu, normal_model(np.eye(2), loc=mu), seed=5)
        assert res.estimate == pytest.approx(0.25, abs=1e-3)

    def test_rejects_bad_limits(self):
        with pytest.raises(ValueError):
            prob([0.0, 0.0], [1.0, -1.0], normal_model(np.eye(2)), seed=1)

    def test_complement_d1(self):
        model = mvt_model(3.0, np.eye(1))
        left = prob([-INF], [0.7], model, seed=6)
        right = prob([0.7], [INF], model, seed=7)
        assert left.estimate + right.estimate == pytest.approx(1.0, abs=2e-3)

    def test_monotone_in_box(self):
        model = mvt_model(2.5, np.array([[1.0, 0.3], [0.3, 1.0]]))
        small = prob([-1.0, -1.0], [0.5, 0.5], model, seed=8)
        large = prob([-2.0, -1.5], [1.0, 0.8], model, seed=9)
        assert large.estimate >= small.estimate - 2e-3

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        G = rng.standard_normal((4, 6))
        sigma = G @ G.T
        b = rng.uniform(0.0, 2.0, size=4)
        a = b - rng.uniform(1.0, 3.0, size=4)
        model = mvt_model(3.0, sigma)
        base = prob(a, b, model, seed=12)
        p = rng.permutation(4)
        modelp = mvt_model(3.0, sigma[np.ix_(p, p)])
        perm = prob(a[p], b[p], modelp, seed=13)
        assert perm.estimate == pytest.approx(base.estimate, abs=2e-3)

    def test_deterministic_given_seed(self):
        model = mvt_model(2.0, np.eye(3))
        r1 = prob([-INF] * 3, [0.5] * 3, model, seed=42)
        r2 = prob([-INF] * 3, [0.5] * 3, model, seed=42)
        assert r1 == r2

    def test_whole_space_is_one(self):
        model = mvt_model(1.5, np.eye(2))
        res = prob([-INF, -INF], [INF, INF], model, seed=1)
        assert res.estimate == 1.0


class TestProbSingular:
    def test_rank1_collapse_half(self):
        model = NvmModel.build(None, np.ones((2, 2)), constant(), [1.0])
        assert not model.is_full_rank
        res = prob([-INF, -INF], [0.0, 0.0], model, seed=1)
        assert res.estimate == pytest.approx(0.5, abs=1e-3)

    def test_rank1_min_of_uppers(self):
        model = NvmModel.build(None, np.ones((2, 2)), constant(), [1.0])
        res = prob([-INF, -INF], [0.0, -1.0], model, seed=2)
        oracle = NormalDist().cdf(-1.0)
        assert res.estimate == pytest.approx(oracle, abs=1e-3)

    def test_full_rank_forced_matches_prob(self):
        sigma = np.array([[2.0, 0.6], [0.6, 1.0]])
        model = mvt_model(3.0, sigma)
        direct = prob([-1.0, -INF], [1.0, 0.5], model, seed=3)
        forced = prob_singular([-1.0, -INF], [1.0, 0.5], model, RqmcConfig(), seed=4)
        assert forced.estimate == pytest.approx(direct.estimate, abs=2e-3)

    def test_rank1_mvt(self):
        # X1 = X2 = sqrt(W) Z: P(X <= (0,-1)) = P(T <= -1) for t_nu.
        from scipy.stats import t as t_dist

        model = NvmModel.build(None, np.ones((2, 2)), inverse_gamma(), [3.0])
        res = prob([-INF, -INF], [0.0, -1.0], model, seed=5)
        assert res.estimate == pytest.approx(t_dist(3.0).cdf(-1.0), abs=1.5e-3)

    def test_degenerate_variable_feasible(self):
        model = NvmModel.build(None, np.diag([1.0, 0.0, 1.0]), constant(), [1.0])
        res = prob([-INF, -1.0, -INF], [0.0, 1.0, 0.0], model, seed=6)
        assert res.estimate == pytest.approx(0.25, abs=1e-3)

    def test_degenerate_variable_infeasible(self):
        model = NvmModel.build(None, np.diag([1.0, 0.0, 1.0]), constant(), [1.0])
        res = prob([-INF, 0.5, -INF], [0.0, 1.0, 0.0], model, seed=7)
        assert res.estimate == 0.0
        assert res.error_estimate == 0.0
        assert res.converged

    def test_singular_with_negative_loading(self):
        # X2 = -X1: P(X1 <= 0, X2 <= 0) = P(X1 = 0) boundary -> here
        # P(X1 <= 0, -X1 <= 0) = P(X1 = 0) = 0... use strictly negative
        # uppers for a nontrivial value: P(X1 <= -1, -X1 <= -1) = 0.
        sigma = np.array([[1.0, -1.0], [-1.0, 1.0]])
        model = NvmModel.build(None, sigma, constant(), [1.0])
        res = prob([-INF, -INF], [-1.0, -1.0], model, seed=8)
        assert res.estimate == pytest.approx(0.0, abs=1e-3)
        # And a feasible band: P(-2 < X1 <= 2, -2 < -X1 <= 2) = P(|X1| < 2).
        res2 = prob([-2.0, -2.0], [2.0, 2.0], model, seed=9)
        oracle = NormalDist().cdf(2.0) - NormalDist().cdf(-2.0)
        assert res2.estimate == pytest.approx(oracle, abs=1.5e-3)


class TestVarianceReduction:
    def test_reordering_reduces_variance_mostly(self):
        # Desk-scale version of the randomized reordering experiment.
        from nvmix.mixtures import mean_sqrt_w

        rng = np.random.default_rng(100)
        wins = 0
        trials = 40
        for _ in range(trials):
            d = int(rng.integers(5, 25))
            nu = rng.uniform(0.5, 5.0)
            G = rng.standard_normal((d, d))
            S = G @ G.T
            Dx = np.sqrt(np.diag(S))
            sigma = S / np.outer(Dx, Dx)
            b = rng.uniform(0.0, 3.0 * math.sqrt(d), size=d)
            a = np.full(d, -INF)
            spec = inverse_gamma()
            msw = mean_sqrt_w(spec, [nu])

            reordered = reorder(a, b, sigma, msw)
            # Variance without reordering: use the identity-order problem.
            from nvmix.distribution import ReorderedProblem
            from nvmix.linalg import cholesky

            ident = ReorderedProblem(
                a=a, b=b, factor=cholesky(sigma), perm=np.arange(d)
            )
            u = rng.random((4000, d))
            v_plain = np.var(integrand_g(u, ident, spec, [nu]))
            v_reord = np.var(integrand_g(u, reordered, spec, [nu]))
            if v_reord < v_plain:
                wins += 1
        assert wins >= 0.8 * trials

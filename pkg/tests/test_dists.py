import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from vampmix import ndgrad as nd
from vampmix.dists import (DiagGaussian, LOG_2PI, cov_gauss_logpdf, diag_gauss_entropy,
                           diag_gauss_logpdf, diag_gauss_sample, dirichlet_logpdf,
                           invgamma_logpdf, prec_gauss_logpdf, wishart_logpdf)
from conftest import max_rel_err, numeric_grad

# inputs for the high-precision oracles below
Z5 = np.array([0.3, -1.2, 2.5, 0.0, -0.7])
M5 = np.array([0.1, 0.4, -1.0, 0.2, -0.7])
S5 = np.array([0.5, 2.0, 1.5, 0.1, 3.0])


def val(t):
    return float(nd._value(t))


class TestDiagGaussian:
    def test_standard_at_zero(self):
        assert val(diag_gauss_logpdf(np.zeros(1), 0.0, np.ones(1))) == pytest.approx(-0.918938533204673)

    def test_unit_offset(self):
        assert val(diag_gauss_logpdf(np.ones(1), 0.0, np.ones(1))) == pytest.approx(-1.418938533204673)

    def test_random_case_high_precision(self):
        # mpmath, 40 digits
        assert val(diag_gauss_logpdf(Z5, M5, S5)) == pytest.approx(-9.158772151247811, rel=1e-14)

    def test_matches_scipy(self, rng):
        z, m = rng.standard_normal((2, 6, 3))
        s = rng.uniform(0.1, 3, size=(6, 3))
        want = stats.norm.logpdf(z, m, np.sqrt(s)).sum(-1)
        np.testing.assert_allclose(nd._value(diag_gauss_logpdf(z, m, s)), want, rtol=1e-12)

    def test_non_positive_variance_rejected(self):
        with pytest.raises(ValueError):
            diag_gauss_logpdf(np.zeros(2), 0.0, np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            DiagGaussian(np.zeros(2), np.array([1.0, -1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(nd.ShapeError):
            DiagGaussian(np.zeros(2), np.ones(3))


class TestPrecisionGaussian:
    def test_identity_origin(self):
        assert val(prec_gauss_logpdf(np.zeros(2), np.zeros(2), np.eye(2))) == pytest.approx(-LOG_2PI)

    def test_scalar_precision_four(self):
        # 0.5 ln 4 - 0.5 ln 2 pi, mpmath
        got = val(prec_gauss_logpdf(np.array([0.7]), np.array([0.7]), np.array([[2.0]])))
        assert got == pytest.approx(-0.225791352644727432, rel=1e-14)

    def test_diagonal_factor_matches_diag_gaussian(self, rng):
        z, m = rng.standard_normal((2, 4))
        d = rng.uniform(0.3, 2.0, size=4)
        got = val(prec_gauss_logpdf(z, m, np.diag(d)))
        assert got == pytest.approx(val(diag_gauss_logpdf(z, m, 1.0 / d**2)), rel=1e-12)

    def test_agrees_with_explicit_covariance(self, rng):
        for _ in range(5):
            L = np.tril(rng.standard_normal((3, 3)), -1) + np.diag(rng.uniform(0.5, 2, 3))
            z, m = rng.standard_normal((2, 3))
            C = np.linalg.inv(L @ L.T)
            assert abs(val(prec_gauss_logpdf(z, m, L)) - val(cov_gauss_logpdf(z, m, C))) < 1e-10

    def test_non_positive_diagonal_rejected(self):
        with pytest.raises(ValueError):
            prec_gauss_logpdf(np.zeros(2), np.zeros(2), np.diag([1.0, -1.0]))


class TestCovGaussian:
    def test_isotropic_two(self):
        assert val(cov_gauss_logpdf(np.ones(2), np.ones(2), 2 * np.eye(2))) == pytest.approx(
            -2.531024246969291, rel=1e-14)

    def test_diagonal_matches_diag_gaussian(self, rng):
        z, m = rng.standard_normal((2, 3))
        s = rng.uniform(0.2, 4, 3)
        assert val(cov_gauss_logpdf(z, m, np.diag(s))) == pytest.approx(
            val(diag_gauss_logpdf(z, m, s)), rel=1e-12)

    def test_convolution_monte_carlo(self):
        # N(z; m, 2I) = E_{mu ~ N(m, I)} N(z; mu, I)
        rng = np.random.default_rng(0)
        m, z = np.array([0.3, -0.5]), np.array([1.1, 0.4])
        mu = m + rng.standard_normal((1_000_000, 2))
        dens = np.exp(-0.5 * np.sum((z - mu) ** 2, axis=1) - LOG_2PI)
        se = dens.std(ddof=1) / np.sqrt(len(dens))
        exact = np.exp(val(cov_gauss_logpdf(z, m, 2 * np.eye(2))))
        assert abs(dens.mean() - exact) < 3 * se

    def test_not_positive_definite(self):
        with pytest.raises(nd.CholeskyError):
            cov_gauss_logpdf(np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestDirichlet:
    def test_flat_dirichlet(self):
        assert val(dirichlet_logpdf(np.full(3, 1 / 3), 3.0)) == pytest.approx(np.log(2.0), rel=1e-14)

    def test_beta_half_half(self):
        # Beta(1/2, 1/2) at 1/2 is 2/pi
        assert val(dirichlet_logpdf(np.array([0.5, 0.5]), 1.0)) == pytest.approx(
            -0.451582705289454865, rel=1e-14)

    def test_matches_scipy(self, rng):
        pi = rng.dirichlet(np.ones(5))
        assert val(dirichlet_logpdf(pi, 2.5)) == pytest.approx(
            stats.dirichlet.logpdf(pi, np.full(5, 0.5)), rel=1e-12)

    @given(st.permutations(range(4)))
    def test_permutation_invariant(self, perm):
        pi = np.array([0.1, 0.2, 0.3, 0.4])
        assert val(dirichlet_logpdf(pi[list(perm)], 0.7)) == pytest.approx(
            val(dirichlet_logpdf(pi, 0.7)), rel=1e-14)

    def test_log_pi_form_agrees(self):
        pi = np.array([0.2, 0.5, 0.3])
        assert val(dirichlet_logpdf(log_pi=np.log(pi), alpha=1.3)) == pytest.approx(
            val(dirichlet_logpdf(pi, 1.3)), rel=1e-14)

    def test_boundary_rejected(self):
        with pytest.raises(ValueError, match="open simplex"):
            dirichlet_logpdf(np.array([0.0, 1.0]), 1.0)
        with pytest.raises(ValueError):
            dirichlet_logpdf(np.array([0.4, 0.4]), 1.0)
        with pytest.raises(ValueError):
            dirichlet_logpdf(np.array([0.5, 0.5]), 0.0)

    def test_gradient_through_softmax(self, rng):
        logits = rng.standard_normal(4)
        store = nd.ParamStore({"l": logits, "a": np.array(0.8)})
        fn = lambda v: dirichlet_logpdf(log_pi=nd.log_softmax(v["l"]), alpha=nd.softplus(v["a"]))
        _, g = nd.value_and_grad(fn, store)
        num = numeric_grad(lambda x: val(fn({"l": x, "a": np.array(0.8)})), logits)
        num_a = numeric_grad(lambda x: val(fn({"l": logits, "a": x})), np.array(0.8))
        assert max_rel_err(g["l"], num) < 1e-4
        assert max_rel_err(g["a"], num_a) < 1e-4


class TestWishart:
    def test_one_dimensional_gamma_reduction(self):
        lam = np.linspace(0.05, 12.0, 10)
        v = np.linspace(0.2, 5.0, 10)
        worst = 0.0
        for vv in v:
            for ll in lam:
                got = val(wishart_logpdf(np.array([[np.sqrt(ll)]]), 3.0, np.array([[vv]])))
                want = stats.gamma.logpdf(ll, a=1.5, scale=2 * vv)
                worst = max(worst, abs(got - want))
        assert worst < 1e-8

    def test_matches_scipy(self, rng):
        B = rng.standard_normal((3, 3))
        lam = B @ B.T + np.eye(3)
        V = np.diag([0.5, 1.0, 2.0])
        got = val(wishart_logpdf(np.linalg.cholesky(lam), 5.0, V))
        assert got == pytest.approx(stats.wishart.logpdf(lam, df=5, scale=V), rel=1e-12)

    def test_hyperprior_mean(self):
        p, K = 2, 100
        scale = K ** (1 / p) / (p + 2) * np.eye(p)
        np.testing.assert_allclose((p + 2) * scale, 10 * np.eye(2))
        np.testing.assert_allclose(stats.wishart(df=p + 2, scale=scale).mean(), 10 * np.eye(2))

    def test_permutation_invariance(self, rng):
        B = rng.standard_normal((3, 3))
        lam = B @ B.T + np.eye(3)
        Q = np.eye(3)[[2, 0, 1]]
        a = val(wishart_logpdf(np.linalg.cholesky(lam), 5.0, 2 * np.eye(3)))
        b = val(wishart_logpdf(np.linalg.cholesky(Q @ lam @ Q.T), 5.0, 2 * np.eye(3)))
        assert a == pytest.approx(b, rel=1e-12)

    def test_invalid_dof(self):
        with pytest.raises(ValueError):
            wishart_logpdf(np.eye(3), 1.5, np.eye(3))

    def test_stacked_factors(self, rng):
        L = np.tril(rng.uniform(0.2, 1.0, (4, 2, 2)))
        out = nd._value(wishart_logpdf(L, 4.0, np.eye(2)))
        single = [val(wishart_logpdf(L[i], 4.0, np.eye(2))) for i in range(4)]
        np.testing.assert_allclose(out, single, rtol=1e-13)


class TestInverseGamma:
    def test_at_one(self):
        assert val(invgamma_logpdf(1.0)) == -1.0

    def test_at_two(self):
        assert val(invgamma_logpdf(2.0)) == pytest.approx(-1.886294361119890619, rel=1e-15)

    def test_mode_is_half(self):
        grid = np.linspace(0.05, 3, 5901)
        assert grid[np.argmax(nd._value(invgamma_logpdf(grid)))] == pytest.approx(0.5, abs=1e-3)

    def test_matches_scipy(self):
        a = np.linspace(0.1, 10, 50)
        np.testing.assert_allclose(nd._value(invgamma_logpdf(a)),
                                   stats.invgamma.logpdf(a, 1.0, scale=1.0), rtol=1e-12)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_domain(self, bad):
        with pytest.raises(ValueError):
            invgamma_logpdf(bad)


class TestQuadratureNormalization:
    def _quad(self, f, a, b, **kw):
        return integrate.quad(f, a, b, epsabs=1e-12, epsrel=1e-12, limit=400, **kw)[0]

    def test_diag_gaussian(self):
        f = lambda x: np.exp(val(diag_gauss_logpdf(np.array([x]), 0.4, np.array([2.5]))))
        assert abs(self._quad(f, -np.inf, np.inf) - 1) < 1e-6

    def test_precision_gaussian(self):
        f = lambda x: np.exp(val(prec_gauss_logpdf(np.array([x]), np.array([-1.0]), np.array([[1.7]]))))
        assert abs(self._quad(f, -np.inf, np.inf) - 1) < 1e-6

    def test_cov_gaussian(self):
        f = lambda x: np.exp(val(cov_gauss_logpdf(np.array([x]), np.array([2.0]), np.array([[0.3]]))))
        assert abs(self._quad(f, -np.inf, np.inf) - 1) < 1e-6

    def test_inverse_gamma(self):
        f = lambda a: np.exp(val(invgamma_logpdf(a)))
        assert abs(self._quad(f, 0, 1) + self._quad(f, 1, np.inf) - 1) < 1e-6

    def test_wishart_one_dimensional(self):
        f = lambda l: np.exp(val(wishart_logpdf(np.array([[np.sqrt(l)]]), 3.0, np.array([[1.25]]))))
        assert abs(self._quad(f, 0, np.inf) - 1) < 1e-6

    @pytest.mark.parametrize("alpha", [1.0, 3.0, 7.0])
    def test_dirichlet_two_components(self, alpha):
        # substitute pi = sin^2(t) to tame the endpoint singularities
        def f(t):
            p = np.sin(t) ** 2
            return np.exp(val(dirichlet_logpdf(np.array([p, 1 - p]), alpha))) * np.sin(2 * t)
        assert abs(self._quad(f, 1e-12, np.pi / 2 - 1e-12) - 1) < 1e-6


class TestSampling:
    def test_vanishing_variance_returns_mean(self, rng):
        g = DiagGaussian(np.array([1.0, -2.0]), np.full(2, 1e-300))
        np.testing.assert_allclose(nd._value(diag_gauss_sample(g, rng)), [1.0, -2.0], atol=1e-140)

    def test_clt(self):
        g = DiagGaussian(np.array([0.5, -1.0, 3.0]), np.array([0.2, 1.0, 4.0]))
        n = 100_000
        draws = nd._value(diag_gauss_sample(g, np.random.default_rng(3), n=n))
        assert draws.shape == (n, 3)
        assert np.all(np.abs(draws.mean(0) - g.mean) < 4 * np.sqrt(g.var / n))

    def test_deterministic_per_seed(self):
        g = DiagGaussian(np.zeros(4), np.ones(4))
        a = nd._value(diag_gauss_sample(g, np.random.default_rng(9), n=5))
        b = nd._value(diag_gauss_sample(g, np.random.default_rng(9), n=5))
        np.testing.assert_array_equal(a, b)

    def test_reparameterized_gradient(self, rng):
        eps_rng = lambda: np.random.default_rng(1)
        store = nd.ParamStore({"m": np.array([0.3]), "s": np.array([0.8])})
        fn = lambda v: nd.sum(nd.square(diag_gauss_sample(DiagGaussian(v["m"], v["s"]), eps_rng())))
        _, g = nd.value_and_grad(fn, store)
        num = numeric_grad(lambda x: val(fn({"m": np.array([0.3]), "s": x})), np.array([0.8]))
        assert max_rel_err(g["s"], num) < 1e-4


class TestEntropy:
    def test_unit(self):
        g = DiagGaussian(np.zeros(1), np.ones(1))
        assert val(diag_gauss_entropy(g)) == pytest.approx(1.418938533204672742, rel=1e-15)

    @settings(max_examples=25)
    @given(st.lists(st.floats(0.01, 50), min_size=1, max_size=6))
    def test_scale_identity(self, s):
        s = np.array(s)
        base = val(diag_gauss_entropy(DiagGaussian(np.zeros_like(s), s)))
        scaled = val(diag_gauss_entropy(DiagGaussian(np.zeros_like(s), 4 * s)))
        assert scaled - base == pytest.approx(len(s) / 2 * np.log(4.0), rel=1e-10)

    def test_random_case_high_precision(self):
        # mpmath, 40 digits
        assert val(diag_gauss_entropy(DiagGaussian(M5, S5))) == pytest.approx(
            6.695438817914477931, rel=1e-14)

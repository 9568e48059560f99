"""Special-function and information-calculus checks.

High-precision oracles come from mpmath; distribution-level quantities are
cross-checked against Monte-Carlo estimates built straight from density
definitions, independent of the closed forms under test.
"""

import mpmath
import numpy as np
import pytest
from scipy.special import gammaln

from infoseek import numerics as nm


def mc_dirichlet_entropy(alpha, n_samples, rng):
    """MC entropy from the density definition: -E[log q(z)]."""
    z = rng.dirichlet(alpha, size=n_samples)
    log_b = gammaln(alpha).sum() - gammaln(alpha.sum())
    logq = ((alpha - 1.0) * np.log(z)).sum(axis=1) - log_b
    return -logq.mean(), logq.std(ddof=1) / np.sqrt(n_samples)


def mc_dirichlet_kl(qa, pa, n_samples, rng):
    """MC KL from the density definition: E_q[log q - log p]."""
    z = rng.dirichlet(qa, size=n_samples)
    log_b_q = gammaln(qa).sum() - gammaln(qa.sum())
    log_b_p = gammaln(pa).sum() - gammaln(pa.sum())
    ratio = ((qa - pa) * np.log(z)).sum(axis=1) - log_b_q + log_b_p
    return ratio.mean(), ratio.std(ddof=1) / np.sqrt(n_samples)


class TestSpecialFunctions:
    def test_lgamma_known_values(self):
        assert nm.lgamma(1.0) == pytest.approx(0.0, abs=1e-14)
        assert nm.lgamma(2.0) == pytest.approx(0.0, abs=1e-14)
        assert nm.lgamma(0.5) == pytest.approx(0.5723649429, abs=1e-9)

    def test_digamma_known_values(self):
        assert nm.digamma(1.0) == pytest.approx(-0.5772156649, abs=1e-9)
        assert nm.digamma(2.0) == pytest.approx(0.4227843351, abs=1e-9)
        assert nm.digamma(0.5) == pytest.approx(-1.9635100260, abs=1e-9)

    def test_trigamma_known_values(self):
        assert nm.trigamma(1.0) == pytest.approx(np.pi**2 / 6.0, abs=1e-12)
        assert nm.trigamma(2.0) == pytest.approx(np.pi**2 / 6.0 - 1.0, abs=1e-12)
        assert nm.trigamma(10.0) == pytest.approx(0.1051663357, abs=1e-9)

    @pytest.mark.parametrize("fn,mp_fn,atol", [
        (nm.lgamma, mpmath.loggamma, 1e-12),
        (nm.digamma, lambda x: mpmath.psi(0, x), 1e-10),
        (nm.trigamma, lambda x: mpmath.psi(1, x), 1e-8),
    ])
    def test_against_mpmath(self, fn, mp_fn, atol):
        # absolute tolerance where representable, else relative 1e-12:
        # for example lgamma(1e6) ~ 1.28e7, whose float64 spacing alone
        # exceeds 1e-12.
        rng = np.random.default_rng(0)
        xs = 10.0 ** rng.uniform(-3, 6, size=200)
        for x in xs:
            got = fn(float(x))
            want = float(mp_fn(mpmath.mpf(float(x))))
            assert abs(got - want) <= max(atol, 1e-12 * abs(want))

    def test_recurrence_identities(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.1, 100.0, size=10_000)
        assert np.max(np.abs(nm.digamma(x + 1.0) - nm.digamma(x) - 1.0 / x)) < 1e-10
        assert np.max(np.abs(nm.lgamma(x + 1.0) - nm.lgamma(x) - np.log(x))) < 1e-10
        assert np.max(np.abs(nm.trigamma(x + 1.0) - nm.trigamma(x) + 1.0 / x**2)) < 1e-8

    def test_domain_errors(self):
        for fn in (nm.lgamma, nm.digamma, nm.trigamma):
            with pytest.raises(ValueError):
                fn(0.0)
            with pytest.raises(ValueError):
                fn(-1.0)
            with pytest.raises(ValueError):
                fn(float("nan"))


class TestParamTypes:
    def test_dirichlet_validation(self):
        with pytest.raises(ValueError):
            nm.DirichletParams(np.array([1.0]))  # N >= 2
        with pytest.raises(ValueError):
            nm.DirichletParams(np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            nm.DirichletParams(np.array([1.0, np.inf]))

    def test_gaussian_validation(self):
        with pytest.raises(ValueError):
            nm.GaussianParams(np.zeros(2), np.zeros(3))
        with pytest.raises(ValueError):
            nm.GaussianParams(np.array([np.nan]), np.zeros(1))

    def test_simplex_validation(self):
        nm.Simplex(np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            nm.Simplex(np.array([0.6, 0.5]))
        with pytest.raises(ValueError):
            nm.Simplex(np.array([1.1, -0.1]))


class TestDirichletCalculus:
    def test_log_beta_values(self):
        assert nm.log_beta(nm.DirichletParams([1, 1])) == pytest.approx(0.0, abs=1e-14)
        assert nm.log_beta(nm.DirichletParams([1, 1, 1])) == pytest.approx(-0.6931471806, abs=1e-9)
        assert nm.log_beta(nm.DirichletParams([2, 1])) == pytest.approx(-0.6931471806, abs=1e-9)

    def test_entropy_values(self):
        assert nm.dirichlet_entropy(nm.DirichletParams([1, 1])) == pytest.approx(0.0, abs=1e-14)
        assert nm.dirichlet_entropy(nm.DirichletParams([1, 1, 1])) == pytest.approx(
            -0.6931471806, abs=1e-9
        )
        assert nm.dirichlet_entropy(nm.DirichletParams([2, 1])) == pytest.approx(
            -0.1931471806, abs=1e-9
        )

    def test_kl_values(self):
        q = nm.DirichletParams([3, 2])
        assert nm.dirichlet_kl(q, nm.DirichletParams([3, 2])) == pytest.approx(0.0, abs=1e-14)
        assert nm.dirichlet_kl(
            nm.DirichletParams([2, 1]), nm.DirichletParams([1, 1])
        ) == pytest.approx(np.log(2) - 0.5, abs=1e-12)
        # asymmetry: reversing the pair gives 1 - ln 2, not ln 2 - 1/2
        # (hand evaluation E_uniform[-log(2 z_1)] = 1 - ln 2; MC-checked)
        assert nm.dirichlet_kl(
            nm.DirichletParams([1, 1]), nm.DirichletParams([2, 1])
        ) == pytest.approx(1.0 - np.log(2), abs=1e-12)

    def test_kl_dimension_mismatch(self):
        with pytest.raises(ValueError):
            nm.dirichlet_kl(nm.DirichletParams([1, 1]), nm.DirichletParams([1, 1, 1]))

    def test_expected_log_values(self):
        np.testing.assert_allclose(
            nm.dirichlet_expected_log(nm.DirichletParams([1, 1])), [-1.0, -1.0], atol=1e-12
        )
        np.testing.assert_allclose(
            nm.dirichlet_expected_log(nm.DirichletParams([2, 1])), [-0.5, -1.5], atol=1e-12
        )
        symmetric = nm.dirichlet_expected_log(nm.DirichletParams([3.7] * 5))
        assert np.ptp(symmetric) == 0.0

    def test_expected_log_jensen(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 8))
            d = nm.DirichletParams(rng.uniform(0.2, 20.0, size=n))
            assert np.exp(nm.dirichlet_expected_log(d)).sum() <= 1.0 + 1e-12

    def test_mean(self):
        mean = nm.dirichlet_mean(nm.DirichletParams([2, 1, 1]))
        np.testing.assert_allclose(mean.probs, [0.5, 0.25, 0.25], atol=1e-15)

    def test_sample_determinism_and_law(self):
        d = nm.DirichletParams(np.ones(4))
        s1 = nm.dirichlet_sample(d, np.random.default_rng(7)).probs
        s2 = nm.dirichlet_sample(d, np.random.default_rng(7)).probs
        np.testing.assert_array_equal(s1, s2)

        rng = np.random.default_rng(8)
        draws = np.stack([nm.dirichlet_sample(d, rng).probs for _ in range(20_000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        np.testing.assert_array_less(np.abs(draws.mean(axis=0) - 0.25), 3 * se)

    def test_entropy_against_mc(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            n = int(rng.integers(2, 11))
            alpha = rng.uniform(0.2, 20.0, size=n)
            est, se = mc_dirichlet_entropy(alpha, 100_000, rng)
            assert abs(nm.dirichlet_entropy(nm.DirichletParams(alpha)) - est) <= 3 * se

    def test_kl_against_mc(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            n = int(rng.integers(2, 11))
            qa = rng.uniform(0.2, 20.0, size=n)
            pa = rng.uniform(0.2, 20.0, size=n)
            est, se = mc_dirichlet_kl(qa, pa, 100_000, rng)
            assert abs(
                nm.dirichlet_kl(nm.DirichletParams(qa), nm.DirichletParams(pa)) - est
            ) <= 3 * se

    def test_kl_nonnegative_zero_iff_equal(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            qa = rng.uniform(0.2, 20.0, size=n)
            pa = rng.uniform(0.2, 20.0, size=n)
            assert nm.dirichlet_kl(nm.DirichletParams(qa), nm.DirichletParams(pa)) >= 0.0
            same = nm.DirichletParams(qa)
            assert abs(nm.dirichlet_kl(same, nm.DirichletParams(qa.copy()))) < 1e-12

    def test_entropy_rows_matches_scalar(self):
        rng = np.random.default_rng(6)
        rows = rng.uniform(0.3, 9.0, size=(12, 5))
        batch = nm.dirichlet_entropy_rows(rows)
        singles = [nm.dirichlet_entropy(nm.DirichletParams(r)) for r in rows]
        np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-12)


class TestGaussianCalculus:
    def test_entropy_value(self):
        g = nm.GaussianParams(np.zeros(1), np.zeros(1))
        assert nm.gaussian_entropy(g) == pytest.approx(0.5 * np.log(2 * np.pi * np.e), abs=1e-12)

    def test_kl_std_normal_values(self):
        assert nm.gaussian_kl_std_normal(
            nm.GaussianParams(np.zeros(3), np.zeros(3))
        ) == pytest.approx(0.0, abs=1e-14)
        assert nm.gaussian_kl_std_normal(
            nm.GaussianParams(np.ones(1), np.zeros(1))
        ) == pytest.approx(0.5, abs=1e-14)

    def test_entropy_against_mc(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            dim = int(rng.integers(1, 6))
            g = nm.GaussianParams(rng.normal(size=dim), rng.uniform(-1, 1, size=dim))
            x = g.mean + g.std * rng.standard_normal((100_000, dim))
            logq = (
                -0.5 * ((x - g.mean) / g.std) ** 2 - g.log_std - 0.5 * np.log(2 * np.pi)
            ).sum(axis=1)
            se = logq.std(ddof=1) / np.sqrt(logq.size)
            assert abs(nm.gaussian_entropy(g) + logq.mean()) <= 3 * se

    def test_general_kl_against_mc_and_special_case(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            dim = int(rng.integers(1, 5))
            q = nm.GaussianParams(rng.normal(size=dim), rng.uniform(-1, 1, size=dim))
            p = nm.GaussianParams(rng.normal(size=dim), rng.uniform(-1, 1, size=dim))
            x = q.mean + q.std * rng.standard_normal((200_000, dim))
            logq = (-0.5 * ((x - q.mean) / q.std) ** 2 - q.log_std).sum(axis=1)
            logp = (-0.5 * ((x - p.mean) / p.std) ** 2 - p.log_std).sum(axis=1)
            ratio = logq - logp
            se = ratio.std(ddof=1) / np.sqrt(ratio.size)
            assert abs(nm.gaussian_kl(q, p) - ratio.mean()) <= 3 * se
        q = nm.GaussianParams(rng.normal(size=4), rng.uniform(-1, 1, size=4))
        std_normal = nm.GaussianParams(np.zeros(4), np.zeros(4))
        assert nm.gaussian_kl(q, std_normal) == pytest.approx(
            nm.gaussian_kl_std_normal(q), abs=1e-12
        )

    def test_reparam_sample_determinism(self):
        g = nm.GaussianParams(np.array([1.0, -2.0]), np.array([0.1, -0.3]))
        s1 = nm.gaussian_reparam_sample(g, np.random.default_rng(11))
        s2 = nm.gaussian_reparam_sample(g, np.random.default_rng(11))
        np.testing.assert_array_equal(s1, s2)
        zero_std = nm.GaussianParams(np.array([3.0]), np.array([-700.0]))
        assert nm.gaussian_reparam_sample(zero_std, np.random.default_rng(1))[0] == pytest.approx(3.0)

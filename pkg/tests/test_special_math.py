"""Checks for scalar special functions and the two Dirichlet KL forms.

Expected values come from independent oracles, not from the functions under
test: factorials for lgamma, an Euler-Maclaurin limit for the digamma
constant, Beta-density quadrature for K=2 KLs, and Monte-Carlo sampling for
a sharp K=3 KL.  Frozen constants below were produced by those oracles.
"""

import math

import numpy as np
import pytest
from scipy import integrate

from evibench.errors import DomainError, ShapeError
from evibench.special_math import (
    DirichletParams,
    digamma,
    kl_dirichlet_pair,
    kl_dirichlet_vs_uniform,
    lgamma,
)


def euler_gamma_oracle(n: int = 10_000) -> float:
    # Euler-Maclaurin tail of H_n - ln n; error is O(n^-4).
    h = sum(1.0 / k for k in range(1, n + 1))
    return h - math.log(n) - 0.5 / n + 1.0 / (12.0 * n * n)


def beta_log_density(x, a, b):
    logb = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - logb


def beta_kl_quadrature(p, q) -> float:
    """KL[Beta(p) || Beta(q)] by adaptive quadrature on (0, 1)."""

    def integrand(x):
        lp = beta_log_density(x, *p)
        lq = beta_log_density(x, *q)
        return math.exp(lp) * (lp - lq)

    val, err = integrate.quad(integrand, 0.0, 1.0, limit=400)
    assert err < 1e-7
    return val


class TestLgamma:
    def test_trivial_values(self):
        assert lgamma(1.0) == pytest.approx(0.0, abs=1e-12)
        assert lgamma(2.0) == pytest.approx(0.0, abs=1e-12)

    def test_factorial_oracle(self):
        # Gamma(n) = (n-1)!
        for n in range(2, 12):
            assert lgamma(float(n)) == pytest.approx(
                math.log(math.factorial(n - 1)), abs=1e-10
            )
        assert lgamma(5.0) == pytest.approx(3.1780538, abs=1e-7)

    @pytest.mark.parametrize("bad", [0.0, -1.0, -0.5, float("nan"), float("inf")])
    def test_domain_errors(self, bad):
        with pytest.raises(DomainError):
            lgamma(bad)


class TestDigamma:
    def test_euler_mascheroni(self):
        gamma = euler_gamma_oracle()
        assert digamma(1.0) == pytest.approx(-gamma, abs=1e-12)
        assert digamma(1.0) == pytest.approx(-0.5772157, abs=5e-8)

    def test_recurrence_from_one(self):
        # psi(n) = -gamma + H_{n-1} for integer n.
        gamma = euler_gamma_oracle()
        assert digamma(2.0) == pytest.approx(1.0 - gamma, abs=1e-12)
        assert digamma(2.0) == pytest.approx(0.4227843, abs=5e-8)
        assert digamma(6.0) == pytest.approx(
            -gamma + sum(1.0 / k for k in range(1, 6)), abs=1e-11
        )

    def test_half_argument(self):
        # psi(1/2) = -gamma - 2 ln 2, from the duplication formula.
        gamma = euler_gamma_oracle()
        assert digamma(0.5) == pytest.approx(-gamma - 2.0 * math.log(2.0), abs=1e-12)
        assert digamma(0.5) == pytest.approx(-1.9635100, abs=5e-8)

    def test_recurrence_property(self):
        rng = np.random.default_rng(12)
        for x in rng.uniform(1e-3, 1e4, size=500):
            assert digamma(x + 1.0) - digamma(x) == pytest.approx(1.0 / x, rel=1e-9)

    def test_consistency_with_lgamma(self):
        h = 1e-4
        for x in np.geomspace(0.5, 100.0, 60):
            fd = (lgamma(x + h) - lgamma(x - h)) / (2.0 * h)
            assert digamma(float(x)) == pytest.approx(fd, abs=1e-5)

    @pytest.mark.parametrize("bad", [0.0, -2.0, float("nan"), float("-inf")])
    def test_domain_errors(self, bad):
        with pytest.raises(DomainError):
            digamma(bad)


class TestDirichletParams:
    def test_fields(self):
        d = DirichletParams(np.array([2.0, 1.0, 0.5]))
        assert d.K == 3
        assert d.strength == pytest.approx(3.5)

    def test_rejects_single_class(self):
        with pytest.raises(DomainError):
            DirichletParams(np.array([3.0]))

    def test_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            DirichletParams(np.array([1.0, 0.0]))
        with pytest.raises(DomainError):
            DirichletParams(np.array([1.0, -2.0]))

    def test_rejects_nonfinite(self):
        with pytest.raises(DomainError):
            DirichletParams(np.array([1.0, float("inf")]))

    def test_rejects_matrix(self):
        with pytest.raises(ShapeError):
            DirichletParams(np.ones((2, 2)))


class TestKlVsUniform:
    def test_flat_is_zero(self):
        assert kl_dirichlet_vs_uniform([1.0, 1.0, 1.0]) == 0.0
        assert kl_dirichlet_vs_uniform(np.ones(7)) == 0.0

    def test_beta_quadrature_oracle(self):
        # For K=2 the Dirichlet is a Beta and the flat reference has density 1.
        for a, b in [(2.0, 1.0), (2.0, 2.0), (0.7, 3.2), (10.0, 0.5)]:
            want = beta_kl_quadrature((a, b), (1.0, 1.0))
            got = kl_dirichlet_vs_uniform([a, b])
            assert got == pytest.approx(want, abs=1e-8)

    def test_frozen_values(self):
        # Quadrature oracle outputs: [2,1] -> ln2 - 1/2, [2,2] -> ln6 - 5/3.
        assert kl_dirichlet_vs_uniform([2.0, 1.0]) == pytest.approx(
            0.19314718, abs=1e-7
        )
        assert kl_dirichlet_vs_uniform([2.0, 2.0]) == pytest.approx(
            0.12509280, abs=1e-7
        )

    def test_monte_carlo_sharp(self):
        # High-strength K=3 case where quadrature is awkward; 1e6 draws.
        alpha = np.array([98.0, 1.0, 1.0])
        rng = np.random.default_rng(7)
        n = 1_000_000
        x = rng.dirichlet(alpha, size=n)
        lognorm = math.lgamma(alpha.sum()) - sum(math.lgamma(a) for a in alpha)
        logp = lognorm + ((alpha - 1.0) * np.log(x)).sum(axis=1)
        logq = math.lgamma(3.0)  # flat Dirichlet density on the 2-simplex
        sample = logp - logq
        est = sample.mean()
        se = sample.std(ddof=1) / math.sqrt(n)
        assert kl_dirichlet_vs_uniform(alpha) == pytest.approx(est, abs=3.0 * se)

    def test_nonnegative_property(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            k = int(rng.integers(2, 21))
            alpha = rng.uniform(0.1, 50.0, size=k)
            assert kl_dirichlet_vs_uniform(alpha) >= 0.0

    def test_accepts_dirichlet_params(self):
        d = DirichletParams(np.array([2.0, 1.0]))
        assert kl_dirichlet_vs_uniform(d) == pytest.approx(0.19314718, abs=1e-7)


class TestKlPair:
    def test_identity_is_zero(self):
        assert kl_dirichlet_pair([3.0, 4.0], [3.0, 4.0]) == 0.0

    def test_matches_vs_uniform(self):
        assert kl_dirichlet_pair([2.0, 1.0], [1.0, 1.0]) == pytest.approx(
            0.19314718, abs=1e-7
        )

    def test_specialisation_property(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            k = int(rng.integers(2, 12))
            p = rng.uniform(0.1, 50.0, size=k)
            assert kl_dirichlet_pair(p, np.ones(k)) == pytest.approx(
                kl_dirichlet_vs_uniform(p), abs=1e-12
            )

    def test_beta_quadrature_oracle(self):
        for p, q in [((2.0, 1.0), (3.0, 4.0)), ((5.0, 0.5), (1.0, 2.0))]:
            want = beta_kl_quadrature(p, q)
            got = kl_dirichlet_pair(list(p), list(q))
            assert got == pytest.approx(want, abs=1e-8)

    def test_monte_carlo_sharp_target(self):
        # The DPN in-distribution target shape: sharp vs flat, K=3.
        p = np.array([98.0, 1.0, 1.0])
        rng = np.random.default_rng(11)
        n = 1_000_000
        x = rng.dirichlet(p, size=n)
        lognorm = math.lgamma(p.sum()) - sum(math.lgamma(a) for a in p)
        logp = lognorm + ((p - 1.0) * np.log(x)).sum(axis=1)
        logq = math.lgamma(3.0)
        sample = logp - logq
        est, se = sample.mean(), sample.std(ddof=1) / math.sqrt(n)
        assert kl_dirichlet_pair(p, np.ones(3)) == pytest.approx(est, abs=3.0 * se)

    def test_nonnegative_property(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            k = int(rng.integers(2, 21))
            p = rng.uniform(0.1, 50.0, size=k)
            q = rng.uniform(0.1, 50.0, size=k)
            assert kl_dirichlet_pair(p, q) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            kl_dirichlet_pair([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_nonpositive_parameter(self):
        with pytest.raises(DomainError):
            kl_dirichlet_pair([1.0, 0.0], [1.0, 1.0])

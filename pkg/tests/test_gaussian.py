import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qarv.autodiff import Tensor, gradient_check
from qarv.gaussian import (ALPHABET, DENSITY_FLOOR, N_MAX, N_MIN, PMF_TOTAL,
                           BoxedGaussian, QuantizedPmf, SIGMA_MAX, SIGMA_MIN,
                           UniformPosterior, pmf_for_sigma,
                           pmf_table_for_sigmas, prior_density, quantize_pmf,
                           rate_nats, real_pmf_for_sigmas, std_normal_cdf)

# high-precision reference values (Abramowitz/Stegun-grade, frozen)
PHI_HALF = 0.6914624612740131


def math_phi(x: float) -> float:
    """Independent CDF route through the C library's erf."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


class TestStdNormalCdf:
    def test_symmetry_point(self):
        assert std_normal_cdf(0.0) == pytest.approx(0.5, abs=1e-12)

    def test_complement_identity(self):
        x = np.random.default_rng(0).uniform(-8, 8, size=1000)
        np.testing.assert_allclose(std_normal_cdf(x) + std_normal_cdf(-x), 1.0,
                                   atol=1e-12)

    def test_reference_value(self):
        assert abs(std_normal_cdf(0.5) - PHI_HALF) < 1e-7

    def test_against_independent_erf(self):
        xs = np.linspace(-6, 6, 201)
        ref = np.array([math_phi(float(v)) for v in xs])
        np.testing.assert_allclose(std_normal_cdf(xs), ref, atol=1e-7)

    def test_tensor_gradient(self):
        x = Tensor(np.linspace(-2, 2, 9), requires_grad=True)
        err = gradient_check(lambda: (std_normal_cdf(x) * x).sum(), [x])
        assert err < 1e-5


class TestPriorDensity:
    def test_tight_sigma_approaches_unit_box(self):
        val = prior_density(0.0, 0.0, SIGMA_MIN)
        assert val == pytest.approx(1.0, abs=1e-9)

    def test_center_value_sigma_one(self):
        assert prior_density(0.3, 0.3, 1.0) == pytest.approx(2 * PHI_HALF - 1.0,
                                                             abs=1e-6)

    def test_integrates_to_one(self):
        for sigma in (0.2, 1.0, 3.0):
            z = np.linspace(-40, 40, 400001)
            dens = prior_density(z, 0.7, sigma)
            total = np.trapezoid(dens, z)
            assert total == pytest.approx(1.0, abs=1e-4)

    def test_floor_applies(self):
        assert prior_density(30.0, 0.0, SIGMA_MIN) == DENSITY_FLOOR

    def test_sigma_range_enforced_by_tables(self):
        with pytest.raises(ValueError):
            real_pmf_for_sigmas(np.array([SIGMA_MAX * 2]))


class TestRateNats:
    def test_unit_density_is_free(self):
        assert rate_nats(0.0, 0.0, SIGMA_MIN) == pytest.approx(0.0, abs=1e-8)

    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(-4, 4, 2000)
        mu = rng.uniform(-4, 4, 2000)
        sig = rng.uniform(SIGMA_MIN, 5.0, 2000)
        assert np.all(rate_nats(z, mu, sig) >= 0)

    def test_matches_quadrature_density(self):
        # windowed Gaussian mass via Simpson on the pdf, no CDF involved
        rng = np.random.default_rng(2)
        for _ in range(40):
            z = rng.uniform(-2, 2)
            mu = rng.uniform(-2, 2)
            sig = rng.uniform(0.3, 4.0)
            t = np.linspace(z - 0.5, z + 0.5, 4001)
            pdf = np.exp(-0.5 * ((t - mu) / sig) ** 2) / (sig * math.sqrt(2 * math.pi))
            mass = np.trapezoid(pdf, t)
            assert rate_nats(z, mu, sig) == pytest.approx(-math.log(mass), abs=1e-6)

    def test_gradients_flow_to_all_inputs(self):
        rng = np.random.default_rng(3)
        z = Tensor(rng.uniform(-1, 1, 16), requires_grad=True)
        mu = Tensor(rng.uniform(-1, 1, 16), requires_grad=True)
        sig = Tensor(rng.uniform(0.4, 2.0, 16), requires_grad=True)
        err = gradient_check(lambda: rate_nats(z, mu, sig).sum(), [z, mu, sig])
        assert err < 1e-5


class TestRealPmf:
    def test_normalized_and_symmetric(self):
        sig = np.random.default_rng(4).uniform(SIGMA_MIN, SIGMA_MAX, 500)
        pmf = real_pmf_for_sigmas(sig)
        np.testing.assert_allclose(pmf.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(pmf, pmf[:, ::-1])  # exact mirror

    def test_sigma_one_reference_masses(self):
        pmf = real_pmf_for_sigmas(np.array([1.0]))[0]
        center = -N_MIN
        assert pmf[center] == pytest.approx(0.3829249, abs=1e-6)
        assert pmf[center + 1] == pytest.approx(0.2417303, abs=1e-6)
        assert pmf[center + 1] == pmf[center - 1]

    def test_tails_folded_into_edges(self):
        pmf = real_pmf_for_sigmas(np.array([SIGMA_MAX]))[0]
        assert pmf[0] == pmf[-1]
        assert pmf[0] > pmf[1]  # folded mass dominates the neighbor


class TestQuantizedPmf:
    def test_exact_total_and_min_one(self):
        sig = np.random.default_rng(5).uniform(SIGMA_MIN, SIGMA_MAX, 2000)
        freqs, cum = pmf_table_for_sigmas(sig)
        assert freqs.shape == (2000, ALPHABET)
        assert (freqs >= 1).all()
        np.testing.assert_array_equal(freqs.sum(axis=1), PMF_TOTAL)
        assert (np.diff(cum, axis=1) > 0).all()

    def test_scalar_equals_batch_row(self):
        rng = np.random.default_rng(6)
        sigmas = rng.uniform(SIGMA_MIN, SIGMA_MAX, 64)
        batch, _ = pmf_table_for_sigmas(sigmas)
        for s, row in zip(sigmas, batch):
            np.testing.assert_array_equal(pmf_for_sigma(float(s)).freqs, row)

    def test_pure_function_of_bits(self):
        a = pmf_for_sigma(0.73125)
        b = pmf_for_sigma(0.73125)
        np.testing.assert_array_equal(a.freqs, b.freqs)

    def test_validation(self):
        with pytest.raises(ValueError):
            QuantizedPmf(np.zeros(ALPHABET, dtype=np.int64))
        bad = np.ones(ALPHABET, dtype=np.int64)
        with pytest.raises(ValueError):
            QuantizedPmf(bad)  # sums to 65, not 2^16

    def test_remainder_goes_to_largest_mass_first(self):
        real = np.array([[0.5 + 1e-9, 0.25, 0.25 - 1e-9]])
        freqs = quantize_pmf(real)[0]
        assert freqs.sum() == PMF_TOTAL
        # floor leaves remainder units; the largest-mass symbol is first
        assert freqs[0] >= freqs[1] >= freqs[2]

    def test_extreme_sigmas_stay_valid(self):
        for s in (SIGMA_MIN, 0.02, 1.0, 50.0, SIGMA_MAX):
            pmf = pmf_for_sigma(s)
            assert int(pmf.freqs.sum()) == PMF_TOTAL
            assert pmf.freqs.min() >= 1
            assert pmf.n_min == N_MIN and pmf.n_max == N_MAX

    @settings(max_examples=80, deadline=None)
    @given(st.floats(min_value=SIGMA_MIN, max_value=SIGMA_MAX,
                     allow_nan=False, allow_infinity=False))
    def test_quantization_invariants_property(self, sigma):
        pmf = pmf_for_sigma(sigma)
        assert int(pmf.freqs.sum()) == PMF_TOTAL
        assert pmf.freqs.min() >= 1


class TestDistributionObjects:
    def test_uniform_posterior_sample_stays_in_box(self):
        center = Tensor(np.random.default_rng(8).normal(size=(2, 3, 4, 4))
                        .astype(np.float32))
        post = UniformPosterior(center)
        z = post.sample(np.random.default_rng(9))
        assert post.contains(z).all()
        assert z.data.dtype == np.float32

    def test_boxed_gaussian_delegates(self):
        mean = Tensor(np.zeros(5, dtype=np.float32))
        std = Tensor(np.ones(5, dtype=np.float32))
        prior = BoxedGaussian(mean, std)
        z = Tensor(np.zeros(5, dtype=np.float32))
        np.testing.assert_allclose(prior.density(z).data, 2 * PHI_HALF - 1.0,
                                   rtol=1e-6)
        np.testing.assert_allclose(prior.rate_nats(z).data,
                                   -np.log(2 * PHI_HALF - 1.0), rtol=1e-5)


class TestMonteCarloKl:
    def test_noise_rate_matches_quadrature_kl(self):
        """Mean additive-noise rate equals the quadrature KL of the
        unit-box posterior against the windowed-Gaussian prior."""
        rng = np.random.default_rng(7)
        n = 100_000
        for _ in range(20):
            mu = rng.uniform(-2, 2)
            mu_hat = mu + rng.uniform(-1.5, 1.5)
            sig = rng.uniform(0.4, 4.0)
            u = rng.uniform(-0.5, 0.5, size=n)
            samples = rate_nats(mu + u, mu_hat, sig)
            mc = samples.mean()
            se = samples.std(ddof=1) / math.sqrt(n)
            z = np.linspace(mu - 0.5, mu + 0.5, 20001)
            integrand = np.array([-math.log(max(
                math_phi((zi - mu_hat + 0.5) / sig) - math_phi((zi - mu_hat - 0.5) / sig),
                DENSITY_FLOOR)) for zi in z])
            kl = np.trapezoid(integrand, z)
            assert abs(mc - kl) <= 3 * se + 1e-4, (mu, mu_hat, sig)

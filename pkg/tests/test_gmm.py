"""Mixture benchmark: oracle posterior, metrics, trainers, reproducibility."""

import math

import numpy as np
import pytest

from scfm import autodiff as ad
from scfm import estimators as est
from scfm.gmm import (
    GmmInferenceNet,
    GmmModel,
    GmmTrainer,
    GmmTrueModel,
    branch_support,
    exact_posterior,
    init_theta,
    l2_posterior_metric,
    l2_prior_metric,
    train_gmm,
)


class TestTrueModel:
    def test_pmf_increasing_and_normalized(self):
        tm = GmmTrueModel(20)
        assert np.all(np.diff(tm.pmf) > 0)
        assert tm.pmf.sum() == pytest.approx(1.0, abs=1e-12)

    def test_linear_weights(self):
        # component c carries weight c + 5
        tm = GmmTrueModel(20)
        weights = np.arange(20) + 5.0
        np.testing.assert_allclose(tm.pmf, weights / weights.sum(), atol=1e-15)
        assert tm.pmf[0] == pytest.approx(5.0 / 290.0, abs=1e-15)
        assert tm.pmf[19] == pytest.approx(24.0 / 290.0, abs=1e-15)

    def test_component_frequencies(self):
        tm = GmmTrueModel(6)
        rng = np.random.default_rng(0)
        x = tm.sample_batch(100_000, rng)
        # nearest-mean assignment recovers the component at these separations
        comp = np.clip(np.round(x / 10.0), 0, 5).astype(int)
        freqs = np.bincount(comp, minlength=6) / len(x)
        # noise misassigns a small fraction; allow that on top of 3 SE
        for c in range(6):
            se = math.sqrt(tm.pmf[c] * (1 - tm.pmf[c]) / len(x))
            assert abs(freqs[c] - tm.pmf[c]) <= 3 * se + 0.62 * tm.pmf[c] * 0.5


class TestExactPosterior:
    def test_symmetric_two_component(self):
        model = GmmModel(2, np.zeros(2))
        post = exact_posterior(model, np.array([5.0]))
        np.testing.assert_allclose(post[0], [0.5, 0.5], atol=1e-12)

    def test_peak_at_observed_mean(self):
        model = GmmModel(8, np.zeros(8))
        post = exact_posterior(model, np.array([30.0]))
        assert np.argmax(post[0]) == 3

    @pytest.mark.parametrize("c", [2, 7, 20, 50])
    def test_matches_brute_force(self, c):
        rng = np.random.default_rng(c)
        model = GmmModel(c, rng.normal(size=c))
        xs = rng.uniform(-10, 10 * c, size=20)
        post = exact_posterior(model, xs)
        for i, x in enumerate(xs):
            joint = np.array(
                [
                    model.prior_pmf()[z]
                    * math.exp(-0.5 * (x - 10 * z) ** 2 / 25.0)
                    / math.sqrt(2 * math.pi * 25.0)
                    for z in range(c)
                ]
            )
            np.testing.assert_allclose(post[i], joint / joint.sum(), atol=1e-12)


class TestMetrics:
    def test_prior_metric_zero_at_truth(self):
        tm = GmmTrueModel(10)
        model = GmmModel(10, tm.theta.copy())
        assert l2_prior_metric(model, tm) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pmfs(self):
        class FakeTrue:
            pmf = np.array([0.0, 1.0])

        model = GmmModel(2, np.array([1e3, 0.0]))
        assert l2_prior_metric(model, FakeTrue()) == pytest.approx(math.sqrt(2), abs=1e-6)

    def test_prior_metric_random_pair_against_direct_norm(self):
        rng = np.random.default_rng(1)
        tm = GmmTrueModel(12)
        model = GmmModel(12, rng.normal(size=12))
        direct = float(np.sqrt(np.sum((model.prior_pmf() - tm.pmf) ** 2)))
        assert l2_prior_metric(model, tm) == pytest.approx(direct, abs=1e-14)

    def test_posterior_metric_zero_when_net_is_exact(self):
        tm = GmmTrueModel(4)
        xs = tm.sample_batch(50, np.random.default_rng(2))

        class OracleNet:
            def logits_values(self, x):
                return np.log(exact_posterior(tm, x))

        assert l2_posterior_metric(OracleNet(), tm, xs) == pytest.approx(0.0, abs=1e-10)

    def test_posterior_metric_uniform_vs_degenerate(self):
        tm = GmmTrueModel(4)
        xs = np.array([0.0])  # posterior strongly favors component 0

        class UniformNet:
            def logits_values(self, x):
                return np.zeros((len(x), 4))

        got = l2_posterior_metric(UniformNet(), tm, xs)
        post = exact_posterior(tm, xs)[0]
        assert got == pytest.approx(float(np.linalg.norm(0.25 - post)), abs=1e-12)

    def test_posterior_metric_permutation_covariant(self):
        tm = GmmTrueModel(5)
        xs = tm.sample_batch(20, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(len(xs), 5))
        perm = np.array([3, 1, 4, 0, 2])

        class Net:
            def __init__(self, lg):
                self.lg = lg

            def logits_values(self, x):
                return self.lg

        base = exact_posterior(tm, xs)

        class PermTrue:
            mu, var, c = tm.mu, tm.var, 5

            def prior_log_pmf(self):
                return tm.prior_log_pmf()

        d1 = np.mean(np.linalg.norm(est.np_softmax(logits, axis=-1) - base, axis=-1))
        d2 = np.mean(
            np.linalg.norm(
                est.np_softmax(logits[:, perm], axis=-1) - base[:, perm], axis=-1
            )
        )
        assert d1 == pytest.approx(d2, abs=1e-12)

    def test_empty_test_set_rejected(self):
        tm = GmmTrueModel(3)
        net = GmmInferenceNet(3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            l2_posterior_metric(net, tm, np.array([]))


class TestInitAndSupport:
    def test_uniform_init(self):
        pmf = est.np_softmax(init_theta("uniform", 20))
        np.testing.assert_allclose(pmf, 0.05, atol=1e-12)

    def test_adverse_init_constant_decay(self):
        pmf = est.np_softmax(init_theta("adverse", 20))
        ratios = pmf[1:] / pmf[:-1]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)
        assert np.all(ratios < 1)
        assert pmf[0] / pmf[19] == pytest.approx(math.exp(19.0), rel=1e-9)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            init_theta("sideways", 5)

    def test_branch_support(self):
        assert len(branch_support(np.full(20, 0.05))) == 20
        onehot = np.zeros(20)
        onehot[7] = 1.0
        assert list(branch_support(onehot)) == [7]
        pmf = np.zeros(20)
        pmf[:10] = 0.1
        assert len(branch_support(pmf)) == 10


class TestSoftEvaluation:
    def test_soft_joint_matches_hard_at_vertex(self):
        model = GmmModel(5, np.random.default_rng(0).normal(size=5))
        x = np.array([12.0, 31.0])
        z = np.array([[1, 4], [3, 0]])
        hard = model.log_joint(z, x)
        onehot = np.zeros((2, 2, 5))
        for b in range(2):
            for k in range(2):
                onehot[b, k, z[b, k]] = 1.0
        eps = 1e-9
        s_vals = np.clip(onehot, eps, 1 - eps)
        s_vals /= s_vals.sum(-1, keepdims=True)
        soft = model.soft_log_joint(
            ad.tensor(s_vals), ad.tensor(np.log(s_vals)), x
        )
        np.testing.assert_allclose(soft.data, hard.data, atol=1e-5)

    def test_relaxed_step_stays_on_simplex(self):
        tr = GmmTrainer("concrete", 4, seed=0, c=8, batch_size=16, iterations=10)
        with ad.Tape() as tape:
            loss, _ = tr._loss_on_tape(
                tr.true_model.sample_batch(16, tr.rng_data), tr.rng_proposal, 1.7
            )
        tape.backward(loss)
        # gradient flowed through the relaxed path into both groups
        assert tr.model.theta.grad is not None
        assert any(p.grad is not None for p in tr.net.params)


class TestTraining:
    def test_ws_ww_share_generative_path_until_first_update(self):
        # identical seeds: the two methods diverge only through the
        # inference update; after one step the generative params match
        ws = GmmTrainer("ws", 3, seed=5, c=6, batch_size=8, iterations=10)
        ww = GmmTrainer("ww", 3, seed=5, c=6, batch_size=8, iterations=10)
        x1 = ws.true_model.sample_batch(8, ws.rng_data)
        x2 = ww.true_model.sample_batch(8, ww.rng_data)
        np.testing.assert_array_equal(x1, x2)
        ws.step(x1)
        ww.step(x2)
        np.testing.assert_array_equal(ws.model.theta.data, ww.model.theta.data)
        assert any(
            not np.array_equal(a.data, b.data)
            for a, b in zip(ws.net.params, ww.net.params)
        )

    def test_delta_zero_reproduces_plain_wake(self):
        a = GmmTrainer("ww", 2, seed=3, c=5, batch_size=6, iterations=5)
        b = GmmTrainer("delta-ww", 2, seed=3, c=5, batch_size=6, iterations=5, delta=0.0)
        for t in range(5):
            xa = a.true_model.sample_batch(6, a.rng_data)
            xb = b.true_model.sample_batch(6, b.rng_data)
            a.step(xa)
            b.step(xb)
        np.testing.assert_array_equal(a.model.theta.data, b.model.theta.data)
        for pa, pb in zip(a.net.params, b.net.params):
            assert np.array_equal(pa.data, pb.data)

    @pytest.mark.parametrize("method", ["ws", "ww", "delta-ww", "reinforce", "vimco", "relax", "concrete"])
    def test_short_run_yields_cadenced_rows(self, method):
        rows = train_gmm(
            method, 2, iterations=4, seed=0, c=5, batch_size=4, cadence=2,
            grad_std_repeats=2,
        )
        assert [r.iteration for r in rows] == [0, 2, 4]
        for r in rows:
            assert np.isfinite([r.l2_prior, r.l2_posterior, r.grad_std]).all()
            assert 1 <= r.support_size <= 5

    def test_metrics_reproducible_bit_for_bit(self):
        kw = dict(iterations=6, seed=11, c=5, batch_size=4, cadence=3, grad_std_repeats=2)
        r1 = train_gmm("vimco", 2, **kw)
        r2 = train_gmm("vimco", 2, **kw)
        for a, b in zip(r1, r2):
            assert a == b

    def test_invalid_method_and_k(self):
        with pytest.raises(ValueError):
            GmmTrainer("sgd", 2, seed=0)
        with pytest.raises(ValueError):
            GmmTrainer("vimco", 1, seed=0)
        with pytest.raises(ValueError):
            GmmTrainer("ww", 0, seed=0)

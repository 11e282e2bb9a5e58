"""Gaussian-mixture benchmark: model, amortized inference, oracle, trainer.

The generative side is a categorical prior over C components with fixed,
well-separated means (10c) and fixed variance (25); only the prior logits
are learned.  The inference side is a 1-16-C tanh network.  Because the
component count is small, the exact posterior is available by enumeration
and every metric is computed against it.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import estimators as est
from .distributions import (
    CategoricalDist,
    categorical_sample_pmf,
    concrete_log_prob,
    normal_log_density,
)
from .estimators import ControlVariateNet, ParticleSet
from .nn import Mlp, flatten_grads
from .optim import Adam

MEAN_SPACING = 10.0
COMPONENT_STD = 5.0

METHODS = ("ws", "ww", "delta-ww", "reinforce", "vimco", "relax", "concrete")


def _log_softmax_np(x):
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


class GmmModel:
    """Learnable categorical prior with fixed component means and variances."""

    def __init__(self, c, theta_init):
        if c < 2:
            raise ValueError("need at least two components")
        self.c = c
        self.theta = ad.parameter(np.asarray(theta_init, dtype=np.float64))
        self.mu = MEAN_SPACING * np.arange(c, dtype=np.float64)
        self.var = np.full(c, COMPONENT_STD**2)

    def prior_pmf(self):
        return est.np_softmax(self.theta.data)

    def prior_log_pmf(self):
        return _log_softmax_np(self.theta.data)

    def log_joint(self, z, x):
        """log p(z, x) per particle; shape (batch, K).  Only the prior term
        carries gradient (the likelihood parameters are fixed)."""
        z = np.asarray(z)
        x = np.asarray(x, dtype=np.float64)
        log_prior = ad.take(ad.log_softmax(self.theta), z)
        log_lik = normal_log_density(x[:, None], self.mu[z], self.var[z])
        return log_prior + ad.tensor(log_lik)

    def soft_log_joint(self, s, log_s, x):
        """Joint density with soft component selection for simplex samples.

        Prior term: log of the sample-weighted prior mass.  Likelihood:
        normal with sample-weighted mean and variance.  Never indexes a
        hard component.
        """
        b, k, c = s.shape
        x = np.asarray(x, dtype=np.float64)
        prior_b = ad.broadcast_to(ad.reshape(ad.softmax(self.theta), (1, 1, c)), (b, k, c))
        log_prior = ad.log((s * prior_b).sum(axis=-1))
        mu_b = np.broadcast_to(self.mu, (b, k, c))
        var_b = np.broadcast_to(self.var, (b, k, c))
        m = (s * ad.tensor(mu_b)).sum(axis=-1)
        v = (s * ad.tensor(var_b)).sum(axis=-1)
        x_b = ad.tensor(np.broadcast_to(x[:, None], (b, k)))
        diff = x_b - m
        log_lik = diff * diff * (-0.5) / v - ad.log(v) * 0.5 - 0.5 * math.log(2 * math.pi)
        return log_prior + log_lik

    def dream(self, n, rng):
        """Ancestral (z, x) pairs from the current model, parameters detached."""
        z = categorical_sample_pmf(self.prior_pmf(), rng, k=n)
        x = self.mu[z] + COMPONENT_STD * rng.standard_normal(n)
        return z, x


class GmmTrueModel:
    """Data-generating mixture with linearly increasing component mass."""

    def __init__(self, c):
        weights = np.arange(c, dtype=np.float64) + 5.0
        self.c = c
        self.pmf = weights / weights.sum()
        self.theta = np.log(self.pmf)
        self.mu = MEAN_SPACING * np.arange(c, dtype=np.float64)
        self.var = np.full(c, COMPONENT_STD**2)

    def prior_log_pmf(self):
        return _log_softmax_np(self.theta)

    def sample_batch(self, n, rng):
        z = categorical_sample_pmf(self.pmf, rng, k=n)
        return self.mu[z] + COMPONENT_STD * rng.standard_normal(n)


class GmmInferenceNet:
    """Amortization network mapping a scalar observation to prior logits."""

    def __init__(self, c, rng):
        self.c = c
        self.mlp = Mlp([1, 16, c], rng)

    @property
    def params(self):
        return self.mlp.params

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.mlp(ad.tensor(x[:, None]))

    def logits_values(self, x):
        out = self.logits(np.asarray(x))
        return out.data

    def log_prob(self, z, x):
        """log q(z | x) for paired arrays; shape (n,)."""
        z = np.asarray(z)
        lsm = ad.log_softmax(self.logits(x))
        return ad.reshape(ad.take_along_rows(lsm, z[:, None]), (len(z),))


def exact_posterior(model, x):
    """Exact component posterior rows for each observation.

    Works for any object exposing ``prior_log_pmf`` plus fixed ``mu``/``var``
    (the learnable model and the true model both qualify).
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    log_joint = model.prior_log_pmf()[None, :] + normal_log_density(
        x[:, None], model.mu[None, :], model.var[None, :]
    )
    return est.np_softmax(log_joint, axis=-1)


def l2_prior_metric(model, true_model):
    """Euclidean distance between prior PMFs."""
    pmf = model.prior_pmf() if hasattr(model, "prior_pmf") else est.np_softmax(model.theta)
    return float(np.linalg.norm(pmf - true_model.pmf))


def l2_posterior_metric(net, true_model, xs):
    """Mean Euclidean distance between amortized and exact posteriors."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("empty evaluation set")
    q = est.np_softmax(net.logits_values(xs), axis=-1)
    post = exact_posterior(true_model, xs)
    return float(np.mean(np.linalg.norm(q - post, axis=-1)))


def init_theta(mode, c):
    """Initial prior logits: 'adverse' decays one nat per component,
    'uniform' is flat."""
    if mode == "adverse":
        return -np.arange(c, dtype=np.float64)
    if mode == "uniform":
        return np.zeros(c)
    raise ValueError(f"unknown init mode: {mode!r}")


def branch_support(pmf, threshold=1e-3):
    """Indices holding more than ``threshold`` mass (pruning diagnostic)."""
    return np.flatnonzero(np.asarray(pmf) > threshold)


@dataclass
class MetricsRow:
    iteration: int
    method: str
    k: int
    seed: int
    l2_prior: float
    l2_posterior: float
    grad_std: float
    support_size: int


GMM_CSV_HEADER = [
    "iteration",
    "method",
    "K",
    "seed",
    "l2_prior",
    "l2_posterior",
    "grad_std",
    "support_size",
]


def write_gmm_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GMM_CSV_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.iteration,
                    r.method,
                    r.k,
                    r.seed,
                    repr(r.l2_prior),
                    repr(r.l2_posterior),
                    repr(r.grad_std),
                    r.support_size,
                ]
            )


def _particles_from_proposal(model, net_logits, proposal, x, k, rng):
    """Sample K particles per datapoint and assemble the particle set."""
    z = proposal.sample(rng, k=k)
    log_q_prop = proposal.log_prob(z)
    if proposal.logits is net_logits:
        score_log_q = None
    else:
        score_log_q = ad.take_along_rows(ad.log_softmax(net_logits), z)
    log_joint = model.log_joint(z, x)
    return ParticleSet(z, log_q_prop, log_joint, score_log_q=score_log_q)


class GmmTrainer:
    """One (method, K, seed) training run with derived RNG streams."""

    def __init__(
        self,
        method,
        k,
        seed,
        init_mode="adverse",
        c=20,
        batch_size=100,
        delta=0.2,
        temp_start=3.0,
        temp_end=0.5,
        lr=1e-3,
        iterations=50_000,
    ):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        if k < 1 or (method == "vimco" and k < 2):
            raise ValueError(f"invalid particle count {k} for method {method!r}")
        self.method = method
        self.k = k
        self.seed = seed
        self.c = c
        self.batch_size = batch_size
        self.delta = delta
        self.temp_start = temp_start
        self.temp_end = temp_end
        self.iterations = iterations
        self._iter = 0

        from .config import derive_rng

        self.rng_data = derive_rng(seed, method, k, "data")
        self.rng_proposal = derive_rng(seed, method, k, "proposal")
        self.rng_sleep = derive_rng(seed, method, k, "sleep")
        self.rng_gradstd = derive_rng(seed, method, k, "gradstd")
        rng_init = derive_rng(seed, method, k, "init")
        rng_test = derive_rng(seed, method, k, "testset")

        self.true_model = GmmTrueModel(c)
        self.test_xs = self.true_model.sample_batch(100, rng_test)
        self.model = GmmModel(c, init_theta(init_mode, c))
        self.net = GmmInferenceNet(c, rng_init)
        self.opt_theta = Adam([self.model.theta], lr=lr)
        self.opt_phi = Adam(self.net.params, lr=lr)
        self.cv = None
        self.opt_rho = None
        if method == "relax":
            self.cv = ControlVariateNet(ControlVariateNet.RELAX_MLP, c, rng=rng_init)
            self.opt_rho = Adam(self.cv.params, lr=lr)

    def temperature(self, iteration):
        if self.iterations <= 1:
            return self.temp_end
        frac = iteration / (self.iterations - 1)
        return self.temp_start + (self.temp_end - self.temp_start) * frac

    def _loss_on_tape(self, x, rng, temperature, rng_sleep=None):
        """Build the method's scalar loss (to minimize) under the active tape."""
        if rng_sleep is None:
            rng_sleep = rng
        b = len(x)
        method = self.method
        net_logits = self.net.logits(x)
        if method == "concrete":
            c = self.c
            u = np.clip(rng.random((b, self.k, c)), 1e-12, 1 - 1e-12)
            noise = -np.log(-np.log(u))
            logits_b = ad.broadcast_to(ad.reshape(net_logits, (b, 1, c)), (b, self.k, c))
            y = (logits_b + ad.tensor(noise)) * (1.0 / temperature)
            log_s = ad.log_softmax(y)
            s = ad.exp(log_s)
            log_joint = self.model.soft_log_joint(s, log_s, x)
            log_q = concrete_log_prob(net_logits, log_s, temperature)
            elbo = (ad.logsumexp(log_joint - log_q) - math.log(self.k)).mean()
            return -elbo, None
        if method == "relax":
            shape = (b, self.k, self.c)
            u = rng.random(shape)
            v = rng.random(shape)
            step = est.RelaxStep(
                self.model, self.cv, lambda: self.net.logits(x), x, u, v
            )
            return step.loss(), step

        qdist = CategoricalDist(net_logits)
        proposal = qdist if method != "delta-ww" else est.defensive_mixture(qdist, self.delta)
        ps = _particles_from_proposal(self.model, net_logits, proposal, x, self.k, rng)
        if method == "reinforce":
            return -est.reinforce_surrogate(ps), None
        if method == "vimco":
            return -est.vimco_surrogate(ps), None
        loss = -est.wake_theta_surrogate(ps)
        if method in ("ww", "delta-ww"):
            loss = loss + est.wake_phi_loss(ps)
        else:  # ws; matched computation: K*B dreamed samples
            loss = loss + est.sleep_phi_loss(self.model, self.net, self.k * b, rng_sleep)
        return loss, None

    def step(self, x):
        """One optimizer step on θ and φ (and the control params for relax)."""
        temperature = None
        if self.method == "concrete":
            temperature = self.temperature(self._iter)
        with ad.Tape() as tape:
            loss, relax_step = self._loss_on_tape(
                x, self.rng_proposal, temperature, rng_sleep=self.rng_sleep
            )
        tape.backward(loss)
        theta_grad = (
            self.model.theta.grad
            if self.model.theta.grad is not None
            else np.zeros_like(self.model.theta.data)
        )
        phi_grads = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
            for p in self.net.params
        ]
        if relax_step is not None:
            rho_grads, _ = relax_step.rho_gradient(
                self.net.params, self.cv.params, phi_grads=phi_grads
            )
        self.opt_theta.step([theta_grad])
        self.opt_phi.step(phi_grads)
        if relax_step is not None:
            self.opt_rho.step(rho_grads)

    def phi_grad_draw(self, rng):
        """One fresh inference-gradient sample at fixed parameters."""
        x = self.true_model.sample_batch(self.batch_size, rng)
        temperature = (
            self.temperature(self._iter) if self.method == "concrete" else None
        )
        with ad.Tape() as tape:
            loss, _ = self._loss_on_tape(x, rng, temperature)
        tape.backward(loss)
        return flatten_grads(self.net.params)

    def metrics_row(self, iteration, grad_std_repeats=10):
        grad_std = est.grad_std_metric(
            self.phi_grad_draw, self.rng_gradstd, repeats=grad_std_repeats
        )
        pmf = self.model.prior_pmf()
        return MetricsRow(
            iteration=iteration,
            method=self.method,
            k=self.k,
            seed=self.seed,
            l2_prior=l2_prior_metric(self.model, self.true_model),
            l2_posterior=l2_posterior_metric(self.net, self.true_model, self.test_xs),
            grad_std=grad_std,
            support_size=int(len(branch_support(pmf))),
        )

    def run(self, cadence=100, grad_std_repeats=10, wallclock_max_s=None):
        rows = []
        start = time.monotonic()
        self._iter = 0
        for t in range(self.iterations):
            self._iter = t
            if t % cadence == 0:
                rows.append(self.metrics_row(t, grad_std_repeats))
                if wallclock_max_s is not None and time.monotonic() - start > wallclock_max_s:
                    break
            x = self.true_model.sample_batch(self.batch_size, self.rng_data)
            self.step(x)
        else:
            self._iter = max(0, self.iterations - 1)
            rows.append(self.metrics_row(self.iterations, grad_std_repeats))
        return rows


def train_gmm(
    method,
    k,
    iterations,
    seed,
    init_mode="adverse",
    c=20,
    batch_size=100,
    delta=0.2,
    temp_start=3.0,
    temp_end=0.5,
    cadence=100,
    grad_std_repeats=10,
    lr=1e-3,
    wallclock_max_s=None,
):
    """Train one configuration and return its metrics rows."""
    trainer = GmmTrainer(
        method,
        k,
        seed,
        init_mode=init_mode,
        c=c,
        batch_size=batch_size,
        delta=delta,
        temp_start=temp_start,
        temp_end=temp_end,
        lr=lr,
        iterations=iterations,
    )
    return trainer.run(
        cadence=cadence,
        grad_std_repeats=grad_std_repeats,
        wallclock_max_s=wallclock_max_s,
    )

"""Fully discrete toy model with exact enumeration oracles.

Three latent categories, four observation values, a learnable prior, a
fixed likelihood table, and a per-observation lookup-table inference net.
Small enough that every expectation over particle tuples can be summed
exactly, which is what the estimator unbiasedness tests check against.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import autodiff as ad
from . import estimators as est
from .distributions import categorical_sample_pmf

LIK_TABLE = np.array(
    [
        [0.5, 0.2, 0.2, 0.1],
        [0.1, 0.5, 0.2, 0.2],
        [0.2, 0.1, 0.2, 0.5],
    ]
)


class DiscreteToy:
    """p(z) = Cat(softmax(theta)), p(x|z) fixed table, q(z|x) per-x logits."""

    def __init__(self, theta=None, phi=None):
        self.c = 3
        self.x_vals = 4
        self.lik = LIK_TABLE
        rng = np.random.default_rng(7)
        self.theta = ad.parameter(
            np.asarray(theta) if theta is not None else rng.normal(0, 0.7, self.c)
        )
        self.phi = ad.parameter(
            np.asarray(phi) if phi is not None else rng.normal(0, 0.7, (self.x_vals, self.c))
        )

    @property
    def prior_pmf(self):
        return est.np_softmax(self.theta.data)

    def proposal_logits(self, x):
        """Inference logits rows for integer observations x; shape (B, C)."""
        return ad.take_rows(self.phi, np.asarray(x))

    def log_q(self, z, x):
        """log q(z|x) per particle; z (B, K), x (B,)."""
        lsm = ad.log_softmax(self.proposal_logits(x))
        return ad.take_along_rows(lsm, np.asarray(z))

    def log_joint(self, z, x):
        """log p(z, x) per particle; z (B, K), x (B,)."""
        z = np.asarray(z)
        x = np.asarray(x)
        log_prior = ad.take(ad.log_softmax(self.theta), z)
        log_lik = np.log(self.lik[z, x[:, None]])
        return log_prior + ad.tensor(log_lik)

    def soft_log_joint(self, s, log_s, x):
        """Soft-selection joint for simplex rows s of shape (B, K, C)."""
        b, k, c = s.shape
        x = np.asarray(x)
        prior_b = ad.broadcast_to(ad.reshape(ad.softmax(self.theta), (1, 1, c)), (b, k, c))
        log_prior = ad.log((s * prior_b).sum(axis=-1))
        lik_cols = np.broadcast_to(self.lik[:, x].T[:, None, :], (b, k, c))
        log_lik = ad.log((s * ad.tensor(lik_cols)).sum(axis=-1))
        return log_prior + log_lik

    def dream(self, n, rng):
        z = categorical_sample_pmf(self.prior_pmf, rng, k=n)
        x = np.array(
            [categorical_sample_pmf(self.lik[zi], rng) for zi in z], dtype=int
        )
        return z, x

    def log_prob(self, z, x):
        """Sleep-loss interface: inference log-probability of pairs."""
        z = np.asarray(z)
        lsm = ad.log_softmax(self.proposal_logits(x))
        return ad.reshape(ad.take_along_rows(lsm, z[:, None]), (len(z),))

    def make_particles(self, x, k, rng):
        logits = self.proposal_logits(x)
        pmf = est.np_softmax(logits.data, axis=-1)
        z = categorical_sample_pmf(pmf, rng, k=k)
        return est.ParticleSet(z, self.log_q(z, x), self.log_joint(z, x))

    def exact_log_marginal(self, x):
        joint = self.prior_pmf[:, None] * self.lik
        return float(np.log(joint[:, x].sum()))

    def exact_posterior(self, x):
        joint = self.prior_pmf * self.lik[:, x]
        return joint / joint.sum()


def all_tuples(c, k):
    return np.array(list(itertools.product(range(c), repeat=k)), dtype=int)


def exact_multi_sample_bound(toy, x, k):
    """Exact K-particle bound for one observation, plus exact gradients.

    Enumerates every particle tuple on the tape: the tuple probability and
    the per-tuple bound are both live, so one backward pass yields the true
    gradient of the bound with respect to both parameter groups.

    Returns (value, theta_grad, phi_grad).
    """
    tuples = all_tuples(toy.c, k)
    t = len(tuples)
    xs = np.full(t, x)
    with ad.Tape() as tape:
        log_q = toy.log_q(tuples, xs)
        log_joint = toy.log_joint(tuples, xs)
        row = ad.logsumexp(log_joint - log_q) - math.log(k)
        weight = ad.exp(log_q.sum(axis=-1))
        total = (weight * row).sum()
    tape.backward(total)
    return (
        float(total.data),
        toy.theta.grad.copy(),
        toy.phi.grad.copy(),
    )


def expected_estimator_phi_grad(toy, x, k, surrogate_fn):
    """Exact expectation of a surrogate's inference gradient by enumeration.

    ``surrogate_fn(ps)`` builds the surrogate scalar for a single-row
    particle set.  Each tuple's gradient is weighted by its proposal
    probability under the current parameters.
    """
    tuples = all_tuples(toy.c, k)
    q_pmf = est.np_softmax(toy.proposal_logits([x]).data[0])
    acc = np.zeros_like(toy.phi.data)
    for tup in tuples:
        weight = float(np.prod(q_pmf[tup]))
        with ad.Tape() as tape:
            ps = est.ParticleSet(
                tup,
                toy.log_q(tup[None, :], [x]),
                toy.log_joint(tup[None, :], [x]),
            )
            surrogate = surrogate_fn(ps)
        tape.backward(surrogate)
        if toy.phi.grad is not None:
            acc += weight * toy.phi.grad
    return acc


def exact_sleep_value_and_grad(toy):
    """Exact dreamed-pair loss E_{p(z,x)}[-log q(z|x)] and its phi-gradient."""
    pz = toy.prior_pmf
    with ad.Tape() as tape:
        lsm = ad.log_softmax(toy.phi)  # rows are x, columns z
        weights = (pz[None, :] * toy.lik.T)  # (x_vals, c), p(z, x)
        total = (ad.tensor(weights) * (-lsm)).sum()
    tape.backward(total)
    return float(total.data), toy.phi.grad.copy()

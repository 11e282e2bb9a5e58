"""Gradient estimators and objectives for the multi-particle bound.

Every estimator is written as a surrogate scalar whose taped gradient
equals the estimator's gradient; what is detached (treated as constant
under differentiation) is the whole content of each construction, so each
function states it explicitly.  Weight arithmetic stays in log space
throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .distributions import CategoricalDist
from .nn import Mlp, flatten_grads, param_vector, set_param_vector


def np_logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis)


def np_softmax(a, axis=-1):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


class ParticleSet:
    """K proposal samples with per-particle log q, log joint, and log weight.

    Tensors are shaped (batch, K).  ``log_w`` is always ``log_joint - log_q``.
    ``score_log_q`` is the term the wake-phase inference loss differentiates;
    it defaults to ``log_q`` and differs only under a defensive-mixture
    proposal, where the weights use the mixture but the learned term does not.
    """

    def __init__(self, z, log_q, log_joint, score_log_q=None):
        if log_q.ndim != 2 or log_joint.shape != log_q.shape:
            raise ValueError(
                f"particle tensors must share shape (batch, K); got {log_q.shape} "
                f"and {log_joint.shape}"
            )
        if log_q.shape[1] < 1:
            raise ValueError("particle set needs K >= 1")
        self.z = z
        self.log_q = log_q
        self.log_joint = log_joint
        self.log_w = log_joint - log_q
        self.score_log_q = score_log_q if score_log_q is not None else log_q

    @property
    def k(self):
        return self.log_q.shape[1]

    @property
    def batch(self):
        return self.log_q.shape[0]


@dataclass
class GradientEstimate:
    """Per-group gradients plus scalar diagnostics from one estimator pass."""

    theta: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    surrogate: float = 0.0
    elbo: float = 0.0


def iwae_elbo(ps):
    """Multi-sample bound: mean over the batch of lse(log_w) - log K."""
    return (ad.logsumexp(ps.log_w) - math.log(ps.k)).mean()


def _per_row_elbo(log_w, k):
    return ad.logsumexp(log_w) - math.log(k)


def wake_theta_surrogate(ps):
    """Same value as the bound, with all proposal dependence severed.

    Its generative-parameter gradient is the normalized-weight average of
    the per-particle joint score; the inference parameters get exactly zero.
    """
    log_w = ps.log_joint - ps.log_q.detach()
    return _per_row_elbo(log_w, ps.k).mean()


def reinforce_surrogate(ps):
    """Naive score-function surrogate for the inference parameters.

    The per-datapoint bound multiplies the summed particle scores with a
    detached coefficient; the live bound supplies the pathwise term.
    """
    row = _per_row_elbo(ps.log_w, ps.k)
    coef = np.broadcast_to(row.data[:, None], ps.log_q.shape)
    score = (ad.tensor(coef) * ps.log_q).sum(axis=-1)
    return (score + row).mean()


def vimco_leave_one_out(log_w_values):
    """Per-particle leave-one-out baselines, computed in log space."""
    b, k = log_w_values.shape
    if k < 2:
        raise ValueError("leave-one-out baseline needs K >= 2")
    geo = (np.sum(log_w_values, axis=1, keepdims=True) - log_w_values) / (k - 1)
    rep = np.repeat(log_w_values[:, None, :], k, axis=1)
    rows = np.arange(k)
    rep[:, rows, rows] = geo
    return np_logsumexp(rep, axis=-1) - math.log(k)


def vimco_surrogate(ps):
    """Score-function surrogate with per-particle leave-one-out baselines.

    Each particle's score is weighted by (bound - baseline), both detached;
    the live bound term is kept unchanged.
    """
    if ps.k < 2:
        raise ValueError("this estimator needs K >= 2")
    row = _per_row_elbo(ps.log_w, ps.k)
    baselines = vimco_leave_one_out(ps.log_w.data)
    coef = row.data[:, None] - baselines
    score = (ad.tensor(coef) * ps.log_q).sum(axis=-1)
    return (score + row).mean()


class ControlVariateNet:
    """Control variate for the relaxed score-function estimator.

    ``soft-pmf`` variant: two scalars, a gain and a log-temperature, feeding
    the softened-bound form.  ``mlp`` variant: a free-form (1+C)-16-16-1 tanh
    network averaged over particle rows.
    """

    REBAR = "rebar"
    RELAX_MLP = "relax-mlp"

    def __init__(self, variant, c, rng=None, zero_init=False):
        if variant not in (self.REBAR, self.RELAX_MLP):
            raise ValueError(f"unknown control-variate variant: {variant}")
        self.variant = variant
        self.c = c
        if variant == self.REBAR:
            self.rho1 = ad.parameter(np.asarray(1.0 if not zero_init else 0.0))
            self.rho2 = ad.parameter(np.asarray(0.0))
        else:
            self.mlp = Mlp([1 + c, 16, 16, 1], rng if rng is not None else np.random.default_rng(0))
            if zero_init:
                for p in self.mlp.params:
                    p.data = np.zeros_like(p.data)

    @property
    def params(self):
        if self.variant == self.REBAR:
            return [self.rho1, self.rho2]
        return self.mlp.params

    def value(self, g, x, proposal_logits, model):
        """Per-datapoint control value c(g_{1:K}) of shape (batch,)."""
        b, k, c = g.shape
        if c != self.c:
            raise ValueError(f"control variate built for C={self.c}, got C={c}")
        if self.variant == self.RELAX_MLP:
            x_col = np.broadcast_to(np.asarray(x, dtype=np.float64)[:, None, None], (b, k, 1))
            inp = ad.concat([ad.tensor(x_col), g], axis=-1)
            out = self.mlp(ad.reshape(inp, (b * k, 1 + c)))
            return ad.reshape(out, (b, k)).mean(axis=-1)
        return rebar_control(g, self.rho1, self.rho2, model, x, proposal_logits)


def rebar_control(g, rho1, rho2, model, x, proposal_logits):
    """Softened multi-particle bound scaled by a learnable gain.

    Hard PMFs are replaced by soft ones: each Gumbel row is pushed through a
    tempered softmax and the model/proposal are evaluated with soft category
    selection.  Returns one value per datapoint, shape (batch,).
    """
    b, k, c = g.shape
    temp = math.exp(float(rho2.data))
    if temp < 1e-4:
        raise ValueError("soft-pmf temperature saturates below 1e-4")
    y = g / ad.exp(rho2)
    log_s = ad.log_softmax(y)
    s = ad.exp(log_s)
    soft_log_joint = model.soft_log_joint(s, log_s, x)
    q_pmf = ad.softmax(proposal_logits)
    q_b = ad.broadcast_to(ad.reshape(q_pmf, (b, 1, c)), (b, k, c))
    soft_log_q = ad.log((s * q_b).sum(axis=-1))
    row = ad.logsumexp(soft_log_joint - soft_log_q) - math.log(k)
    return ad.broadcast_to(ad.reshape(rho1, (1,)), (b,)) * row


def relax_surrogate(proposal_logits, x, pack, cv, model):
    """Control-variate score surrogate on a Gumbel pack.

    The score coefficient (bound minus control at the conditional rows) is
    detached; the control evaluated at the free and conditional rows stays
    live so its reparameterized gradients cancel the control's bias.  The
    live bound term is kept, and the control parameters keep their own
    gradient path for the variance step.
    """
    b, k, c = pack.g.shape
    z = pack.z
    log_q_all = ad.log_softmax(proposal_logits)
    log_q = ad.take_along_rows(log_q_all, z)
    log_joint = model.log_joint(z, x)
    log_w = log_joint - log_q
    row = _per_row_elbo(log_w, k)
    c_free = cv.value(pack.g, x, proposal_logits, model)
    c_cond = cv.value(pack.g_cond, x, proposal_logits, model)
    coef = np.broadcast_to((row.data - c_cond.data)[:, None], (b, k))
    score = (ad.tensor(coef) * log_q).sum(axis=-1)
    return (score + row + c_free - c_cond).mean()


class RelaxStep:
    """One relaxed-estimator step with its control-variate variance update.

    Holds the frozen noise of a single draw so the surrogate can be rebuilt
    at shifted inference parameters.  The variance update targets the
    single-sample proxy (mean squared inference-gradient coordinate); its
    control-parameter gradient is a mixed second derivative, recovered with
    a symmetric finite difference of the control-parameter gradient along
    the inference-gradient direction.  In those side evaluations the score
    coefficient's control value is re-evaluated with the control parameters
    live on inputs frozen at the base parameters, which is exactly the
    coefficient's contribution to the proxy gradient.
    """

    def __init__(self, model, cv, logits_fn, x, u, v):
        self.model = model
        self.cv = cv
        self.logits_fn = logits_fn
        self.x = x
        self.u = u
        self.v = v
        self._frozen = None

    def _parts(self, logits):
        from .distributions import gumbel_pack_from_uniforms

        pack = gumbel_pack_from_uniforms(logits, self.u, self.v)
        log_q = ad.take_along_rows(ad.log_softmax(logits), pack.z)
        log_joint = self.model.log_joint(pack.z, self.x)
        row = _per_row_elbo(log_joint - log_q, pack.k)
        c_free = self.cv.value(pack.g, self.x, logits, self.model)
        c_cond = self.cv.value(pack.g_cond, self.x, logits, self.model)
        return pack, log_q, row, c_free, c_cond

    def loss(self):
        """Training loss (negated surrogate); freezes coefficient inputs."""
        logits = self.logits_fn()
        pack, log_q, row, c_free, c_cond = self._parts(logits)
        b, k = log_q.shape
        self._frozen = (pack.g_cond.data.copy(), logits.data.copy(), row.data.copy())
        coef = np.broadcast_to((row.data - c_cond.data)[:, None], (b, k))
        score = (ad.tensor(coef) * log_q).sum(axis=-1)
        return -(score + row + c_free - c_cond).mean()

    def _loss_rho(self):
        """Variance-step loss: like ``loss`` but the coefficient's control
        value keeps the control parameters live on the frozen base inputs."""
        g_cond0, logits0, row0 = self._frozen
        logits = self.logits_fn()
        pack, log_q, row, c_free, c_cond = self._parts(logits)
        b, k = log_q.shape
        c_coef = self.cv.value(
            ad.tensor(g_cond0), self.x, ad.tensor(logits0), self.model
        )
        coef = ad.broadcast_to(ad.reshape(ad.tensor(row0) - c_coef, (b, 1)), (b, k))
        score = (coef * log_q).sum(axis=-1)
        return -(score + row + c_free - c_cond).mean()

    def rho_gradient(self, phi_params, rho_params, phi_grads=None, eps_scale=1e-6):
        """Gradient of the variance proxy for the control parameters.

        ``phi_grads``, when given, are the inference gradients from the
        training backward pass (they define both the proxy and the probe
        direction); otherwise a base pass is run here.  Returns
        (rho_grads, proxy_value).
        """

        def _grads(params):
            return [
                p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params
            ]

        if phi_grads is None:
            with ad.Tape() as tape:
                base_loss = self.loss()
            tape.backward(base_loss)
            phi_grads = _grads(phi_params)
        if self._frozen is None:
            raise RuntimeError("run loss() before the variance step")
        g_phi = np.concatenate([g.reshape(-1) for g in phi_grads])
        d = g_phi.size
        proxy = float(np.sum(g_phi * g_phi)) / d
        g_norm = float(np.linalg.norm(g_phi))
        if g_norm == 0.0:
            return [np.zeros_like(p.data) for p in rho_params], proxy

        base = param_vector(phi_params)
        eps = eps_scale * (1.0 + float(np.linalg.norm(base))) / g_norm
        try:
            set_param_vector(phi_params, base + eps * g_phi)
            with ad.Tape() as tape:
                loss = self._loss_rho()
            tape.backward(loss)
            if all(p.grad is None for p in rho_params):
                raise RuntimeError("no live control-variate path in the surrogate")
            r_plus = _grads(rho_params)
            set_param_vector(phi_params, base - eps * g_phi)
            with ad.Tape() as tape:
                loss = self._loss_rho()
            tape.backward(loss)
            r_minus = _grads(rho_params)
        finally:
            set_param_vector(phi_params, base)
        rho_grads = [(rp - rm) / (eps * d) for rp, rm in zip(r_plus, r_minus)]
        return rho_grads, proxy


def sleep_phi_loss(model, inference_net, num_samples, rng):
    """Mean negative inference log-probability over dreamed pairs.

    (z, x) pairs are ancestrally sampled from the current generative model
    with its parameters detached; only the inference network is live.
    """
    if num_samples < 1:
        raise ValueError("need at least one dreamed sample")
    z, x = model.dream(num_samples, rng)
    log_q = inference_net.log_prob(z, x)
    return -log_q.mean()


def wake_phi_loss(ps):
    """Self-normalized importance-weighted inference loss.

    Weights are a detached softmax over the log weights; the loss is the
    weighted mean of negative particle scores, averaged over the batch.
    """
    w = np_softmax(ps.log_w.data, axis=-1)
    return ((ad.tensor(w) * (-ps.score_log_q)).sum(axis=-1)).mean()


def snis_weights(log_w_values):
    """Normalized importance weights from log weights (log-space softmax)."""
    return np_softmax(np.asarray(log_w_values), axis=-1)


def defensive_mixture(q, delta):
    """Mix a categorical proposal with the uniform distribution.

    Returns a categorical whose PMF is (1-delta) * q + delta / C.  With
    delta == 0 the input distribution itself is returned so downstream
    computation is bit-identical to using ``q`` directly.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError("mixture weight must lie in [0, 1]")
    if delta == 0.0:
        return q
    c = q.num_categories
    pmf = ad.softmax(q.logits) * (1.0 - delta) + (delta / c)
    return CategoricalDist(ad.log(pmf))


def grad_std_metric(grad_fn, rng, repeats=10):
    """Mean over coordinates of the per-coordinate std of gradient draws.

    ``grad_fn(rng)`` must return a flat gradient vector under fresh
    randomness at fixed parameters; the std uses the ``repeats`` draws.
    """
    if repeats < 2:
        raise ValueError("need at least two draws to estimate a std")
    draws = np.stack([np.asarray(grad_fn(rng)) for _ in range(repeats)])
    return float(np.std(draws, axis=0, ddof=1).mean())

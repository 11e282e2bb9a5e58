"""Sampling and differentiable log-probabilities for the estimator family.

Categorical and Normal cover the benchmark models; the Gumbel pack
(reparameterized Gumbels plus conditional Gumbels tied to a sampled
category) feeds the control-variate estimators, and the simplex-valued
relaxation provides the fully reparameterized baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)
_UCLIP = 1e-12  # uniform draws clamped away from {0, 1} before log-log transforms


def _clamped_uniform(rng, shape):
    return np.clip(rng.random(shape), _UCLIP, 1.0 - _UCLIP)


def categorical_sample_pmf(pmf, rng, k=None):
    """Inverse-CDF sampling from pmf rows (last axis holds categories)."""
    pmf = np.asarray(pmf)
    if not np.all(np.isfinite(pmf)):
        raise FloatingPointError("non-finite probabilities in categorical sampling")
    c = pmf.shape[-1]
    cum = np.cumsum(pmf, axis=-1)
    if pmf.ndim == 1:
        shape = () if k is None else (k,)
        u = rng.random(shape + (1,))
        idx = np.sum(u > cum, axis=-1)
    else:
        lead = pmf.shape[:-1]
        shape = lead if k is None else lead + (k,)
        u = rng.random(shape)
        cmp = u[..., None] > cum.reshape(lead + (1,) * (u.ndim - len(lead)) + (c,))
        idx = np.sum(cmp, axis=-1)
    return np.minimum(idx, c - 1)


class CategoricalDist:
    """Categorical over {0..C-1} parameterized by unnormalized log-probs."""

    def __init__(self, logits):
        logits = logits if isinstance(logits, Tensor) else ad.tensor(logits)
        if logits.shape[-1] < 1:
            raise ValueError("categorical needs at least one category")
        self.logits = logits

    @property
    def num_categories(self):
        return self.logits.shape[-1]

    def pmf(self):
        return ad.softmax(self.logits)

    def pmf_values(self):
        x = self.logits.data
        e = np.exp(x - np.max(x, axis=-1, keepdims=True))
        return e / np.sum(e, axis=-1, keepdims=True)

    def sample(self, rng, k=None):
        return categorical_sample_pmf(self.pmf_values(), rng, k=k)

    def log_prob(self, index):
        """log q(index); differentiable w.r.t. the logits."""
        idx = np.asarray(index)
        c = self.num_categories
        if np.any(idx < 0) or np.any(idx >= c):
            raise IndexError(f"category index out of range [0, {c})")
        lsm = ad.log_softmax(self.logits)
        if self.logits.ndim == 1:
            return ad.take(lsm, idx)
        if idx.ndim == lsm.ndim - 1:
            out = ad.take_along_rows(lsm, idx[..., None])
            return ad.reshape(out, idx.shape)
        return ad.take_along_rows(lsm, idx)


class NormalDist:
    """Diagonal normal; ``log_prob`` sums over elements."""

    def __init__(self, mean, std):
        self.mean = mean if isinstance(mean, Tensor) else ad.tensor(mean)
        self.std = std if isinstance(std, Tensor) else ad.tensor(std)
        if np.any(self.std.data <= 0.0):
            raise ValueError("normal std must be strictly positive")

    def sample(self, rng):
        return self.mean.data + self.std.data * rng.standard_normal(self.mean.shape)

    def log_prob(self, x):
        x = x if isinstance(x, Tensor) else ad.tensor(x)
        z = (x - self.mean) / self.std
        per = z * z * (-0.5) - ad.log(self.std) - 0.5 * LOG_2PI
        return per.sum()


def normal_log_density(x, mean, var):
    """Elementwise normal log-density on plain arrays (no tape)."""
    x, mean, var = np.asarray(x), np.asarray(mean), np.asarray(var)
    return -0.5 * (x - mean) ** 2 / var - 0.5 * np.log(var) - 0.5 * LOG_2PI


@dataclass
class GumbelPack:
    """Reparameterized Gumbels, the argmax category, and conditional Gumbels.

    ``g`` rows are logits-shifted Gumbel variates; ``z`` is the per-row
    argmax (its marginal is softmax(logits)); ``g_cond`` is a fresh set of
    Gumbel rows conditioned to share that argmax.  Both carry gradients
    back to the logits.
    """

    g: Tensor
    z: np.ndarray
    z_onehot: np.ndarray
    g_cond: Tensor
    k: int


def _expand_to(t, shape):
    """Insert particle axes before the category axis and broadcast explicitly."""
    if t.shape == shape:
        return t
    new = t.shape[:-1] + (1,) * (len(shape) - t.ndim) + (t.shape[-1],)
    return ad.broadcast_to(ad.reshape(t, new), shape)


def gumbel_pack_from_uniforms(logits, u, v):
    """Deterministic pack construction from pre-drawn uniforms (clamped).

    The logits are normalized first so that the free rows and the
    conditional rows share one marginal distribution (the conditional
    construction places the top value as a standard Gumbel, which is the
    law of the max only when the category weights sum to one).
    """
    u = np.clip(u, _UCLIP, 1.0 - _UCLIP)
    v = np.clip(v, _UCLIP, 1.0 - _UCLIP)
    target_shape = u.shape
    k = target_shape[-2]
    logits_b = _expand_to(ad.log_softmax(logits), target_shape)
    gumbel_noise = -np.log(-np.log(u))
    g = logits_b + ad.tensor(gumbel_noise)

    z = np.argmax(g.data, axis=-1)
    z_onehot = np.zeros(target_shape)
    np.put_along_axis(z_onehot, z[..., None], 1.0, axis=-1)

    # conditional rows: the sampled category keeps a fresh top Gumbel and the
    # rest are pushed below it, preserving argmax == z on every draw
    pi = ad.softmax(logits_b)
    neg_log_v = -np.log(v)
    neg_log_v_top = np.broadcast_to(
        np.take_along_axis(neg_log_v, z[..., None], axis=-1), target_shape
    )
    inner = ad.tensor(neg_log_v) / pi + ad.tensor(neg_log_v_top)
    g_other = -ad.log(inner)
    g_top = ad.tensor(-np.log(neg_log_v_top))
    mask = ad.tensor(z_onehot)
    g_cond = g_other * (ad.tensor(1.0 - z_onehot)) + g_top * mask
    return GumbelPack(g=g, z=z, z_onehot=z_onehot, g_cond=g_cond, k=k)


def gumbel_sample_pack(logits, k, rng):
    """Draw a pack of ``k`` Gumbel rows per logits row."""
    if k < 1:
        raise ValueError("need at least one particle")
    c = logits.shape[-1]
    shape = logits.shape[:-1] + (k, c)
    u = rng.random(shape)
    v = rng.random(shape)
    return gumbel_pack_from_uniforms(logits, u, v)


class ConcreteDist:
    """Temperature-relaxed categorical with samples on the simplex interior."""

    def __init__(self, logits, temperature):
        logits = logits if isinstance(logits, Tensor) else ad.tensor(logits)
        if temperature <= 0.0:
            raise ValueError("temperature must be positive")
        self.logits = logits
        self.temperature = float(temperature)

    def sample_with_log(self, rng, k=None):
        """Reparameterized draw; returns (sample, log-sample) to keep the
        density evaluation in log space."""
        c = self.logits.shape[-1]
        shape = self.logits.shape[:-1] + (() if k is None else (k,)) + (c,)
        u = _clamped_uniform(rng, shape)
        noise = -np.log(-np.log(u))
        logits_b = _expand_to(self.logits, shape)
        y = (logits_b + ad.tensor(noise)) * (1.0 / self.temperature)
        log_s = ad.log_softmax(y)
        return ad.exp(log_s), log_s

    def sample(self, rng, k=None):
        s, _ = self.sample_with_log(rng, k=k)
        return s

    def log_prob(self, s=None, log_s=None):
        if log_s is None:
            if s is None:
                raise ValueError("provide a sample or its log")
            log_s = ad.log(s if isinstance(s, Tensor) else ad.tensor(s))
        return concrete_log_prob(self.logits, log_s, self.temperature)


def concrete_log_prob(logits, log_s, temperature):
    """Log-density of a simplex point under the temperature relaxation.

    Everything stays in log space: ``log_s`` is the log of the sample,
    typically produced by ``sample_with_log``.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    c = logits.shape[-1]
    logits = _expand_to(logits, log_s.shape)
    lam = float(temperature)
    base = math.lgamma(c) + (c - 1) * math.log(lam)
    t1 = (logits - log_s * (lam + 1.0)).sum(axis=-1)
    t2 = ad.logsumexp(logits - log_s * lam) * float(c)
    return t1 - t2 + base

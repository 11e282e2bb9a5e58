"""Optimizer behavior against a hand-written reference."""

import numpy as np
import pytest

from scfm import autodiff as ad
from scfm.optim import Adam


def test_zero_gradient_keeps_params():
    p = ad.parameter(np.array([1.0, -2.0]))
    opt = Adam([p])
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_first_step_is_signed_lr():
    g = np.array([0.3, -4.0, 1e-3])
    p = ad.parameter(np.zeros(3))
    opt = Adam([p], lr=1e-3)
    opt.step([g])
    # bias-corrected moments reduce to m=g, v=g*g, so the update is
    # -lr * g / (|g| + eps) ~ -lr * sign(g)
    np.testing.assert_allclose(p.data, -1e-3 * np.sign(g), rtol=1e-4)
    assert np.all(np.abs(p.data) <= 1e-3 + 1e-12)


def reference_adam(param, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    # scalar-loop reference, independently coded
    p = [float(v) for v in param]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * float(g[i])
            v[i] = b2 * v[i] + (1 - b2) * float(g[i]) ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] = p[i] - lr * mh / (vh**0.5 + eps)
    return np.array(p)


def test_matches_reference_trajectory():
    rng = np.random.default_rng(0)
    init = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(10)]
    p = ad.parameter(init.copy())
    opt = Adam([p])
    for g in grads:
        opt.step([g])
    np.testing.assert_allclose(p.data, reference_adam(init, grads), atol=1e-12)


def test_deterministic_given_inputs():
    def run():
        p = ad.parameter(np.arange(4.0))
        opt = Adam([p], lr=3e-3)
        rng = np.random.default_rng(9)
        for _ in range(25):
            opt.step([rng.normal(size=4)])
        return p.data

    assert np.array_equal(run(), run())


def test_rejects_non_finite_gradient():
    p = ad.parameter(np.zeros(2))
    opt = Adam([p])
    with pytest.raises(FloatingPointError):
        opt.step([np.array([1.0, np.inf])])


def test_rejects_shape_mismatch():
    p = ad.parameter(np.zeros(2))
    opt = Adam([p])
    with pytest.raises(ValueError):
        opt.step([np.zeros(3)])

"""Fast self-verification suite behind the ``check`` CLI subcommand.

Each check returns (name, measured error, tolerance); a check passes when
the error is within tolerance.  These are the exact-oracle checks: finite
differences for the tape and distributions, full enumeration for the
estimator expectations.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import estimators as est
from . import toy as toymod
from .distributions import CategoricalDist, NormalDist
from .nn import Mlp


def check_mlp_finite_difference():
    rng = np.random.default_rng(0)
    mlp = Mlp([3, 8, 8, 1], rng)
    x = rng.normal(size=(5, 3))
    worst = 0.0
    for p in mlp.params:
        worst = max(
            worst, ad.finite_difference_check(lambda _: mlp(ad.tensor(x)).sum(), p)
        )
    return "mlp gradient vs central differences", worst, 1e-4


def check_categorical_log_prob_gradient():
    logits = ad.parameter(np.array([0.2, -1.0, 0.7, 0.1]))
    err = ad.finite_difference_check(
        lambda p: CategoricalDist(p).log_prob(np.array(2)), logits
    )
    return "categorical log-prob gradient", err, 1e-4


def check_normal_log_prob_gradient():
    mean = ad.parameter(np.array([0.3, -0.2]))
    err = ad.finite_difference_check(
        lambda m: NormalDist(m, ad.tensor(np.array([1.5, 0.7]))).log_prob(
            np.array([0.9, 0.1])
        ),
        mean,
    )
    return "normal log-prob gradient", err, 1e-4


def check_reinforce_unbiased():
    toy = toymod.DiscreteToy()
    _, _, exact = toymod.exact_multi_sample_bound(toy, x=1, k=2)
    got = toymod.expected_estimator_phi_grad(toy, 1, 2, est.reinforce_surrogate)
    return "naive score estimator vs enumeration", float(np.max(np.abs(got - exact))), 1e-8


def check_vimco_unbiased():
    toy = toymod.DiscreteToy()
    _, _, exact = toymod.exact_multi_sample_bound(toy, x=1, k=2)
    got = toymod.expected_estimator_phi_grad(toy, 1, 2, est.vimco_surrogate)
    return "leave-one-out estimator vs enumeration", float(np.max(np.abs(got - exact))), 1e-8


def check_sleep_gradient():
    toy = toymod.DiscreteToy()
    _, exact = toymod.exact_sleep_value_and_grad(toy)
    pz = toy.prior_pmf
    acc = np.zeros_like(toy.phi.data)
    for z in range(toy.c):
        for x in range(toy.x_vals):
            weight = pz[z] * toy.lik[z, x]
            with ad.Tape() as tape:
                loss = -toy.log_prob(np.array([z]), np.array([x])).sum()
            tape.backward(loss)
            acc += weight * toy.phi.grad
    return "dreamed-pair loss gradient vs enumeration", float(np.max(np.abs(acc - exact))), 1e-8


def check_theta_gradient_equivalence():
    toy = toymod.DiscreteToy()
    rng = np.random.default_rng(9)
    xs = np.array([0, 1, 2, 3])
    state = rng.bit_generator.state
    with ad.Tape() as tape:
        ps = toy.make_particles(xs, 4, rng)
        s = est.wake_theta_surrogate(ps)
    tape.backward(s)
    g1 = toy.theta.grad.copy()
    rng.bit_generator.state = state
    with ad.Tape() as tape:
        ps = toy.make_particles(xs, 4, rng)
        s = est.reinforce_surrogate(ps)
    tape.backward(s)
    g2 = toy.theta.grad.copy()
    return "generative gradient equivalence", float(np.max(np.abs(g1 - g2))), 1e-10


def check_snis_normalization():
    rng = np.random.default_rng(2)
    lw = rng.normal(size=(6, 9)) * 5.0
    w = est.snis_weights(lw)
    err = float(np.max(np.abs(w.sum(axis=-1) - 1.0)))
    shifted = est.snis_weights(lw + 123.456)
    err = max(err, float(np.max(np.abs(w - shifted))))
    return "normalized weights sum to one / shift invariance", err, 1e-12


ALL_CHECKS = [
    check_mlp_finite_difference,
    check_categorical_log_prob_gradient,
    check_normal_log_prob_gradient,
    check_reinforce_unbiased,
    check_vimco_unbiased,
    check_sleep_gradient,
    check_theta_gradient_equivalence,
    check_snis_normalization,
]


def run_checks(stream=None):
    """Run every check, print a pass/fail table, return overall success."""
    import sys

    stream = stream or sys.stdout
    ok = True
    rows = []
    for fn in ALL_CHECKS:
        name, err, tol = fn()
        passed = err <= tol
        ok = ok and passed
        rows.append((name, err, tol, passed))
    width = max(len(r[0]) for r in rows)
    for name, err, tol, passed in rows:
        flag = "PASS" if passed else "FAIL"
        stream.write(f"{flag}  {name:<{width}}  err={err:.3e}  tol={tol:.0e}\n")
    stream.write(("all checks passed" if ok else "CHECK FAILURES") + "\n")
    return ok

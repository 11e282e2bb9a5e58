"""Tape correctness: forward values, backward identities, finite differences."""

import math

import numpy as np
import pytest

from scfm import autodiff as ad
from scfm.nn import Mlp


def grad_of(build, params):
    with ad.Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def test_forward_values():
    assert ad.tanh(ad.tensor(0.0)).item() == 0.0
    assert ad.logsumexp(ad.tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(
        ad.softmax(ad.tensor([3.5, 3.5, 3.5])).data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15
    )


def test_sum_gradient_is_ones():
    x = ad.parameter(np.random.default_rng(0).normal(size=(3, 4)))
    (g,) = grad_of(lambda: x.sum(), [x])
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_logsumexp_gradient_is_softmax():
    x = ad.parameter(np.array([0.1, -2.0, 1.3, 0.0]))
    (g,) = grad_of(lambda: ad.logsumexp(x), [x])
    e = np.exp(x.data - x.data.max())
    np.testing.assert_allclose(g, e / e.sum(), rtol=1e-12)


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(42)
    mlp = Mlp([4, 8, 8, 1], rng)
    x = rng.normal(size=(6, 4))
    for p in mlp.params:
        err = ad.finite_difference_check(lambda _: mlp(ad.tensor(x)).sum(), p)
        assert err <= 1e-4


@pytest.mark.parametrize(
    "build",
    [
        lambda x: (x * x).sum(),
        lambda x: ad.exp(x * 0.3).sum(),
        lambda x: ad.log(ad.exp(x) + 1.0).mean(),
        lambda x: ad.logsumexp(x * 2.0),
        lambda x: ad.log_softmax(x).sum(),
        lambda x: (ad.softmax(x) * ad.tensor([0.5, -1.0, 2.0, 0.1, 1.3])).sum(),
        lambda x: (ad.tanh(x) / 2.0).sum(),
        lambda x: ad.broadcast_to(ad.reshape(x.sum(axis=-1, keepdims=True), (1, 1)), (2, 3)).sum()
        if x.ndim == 1
        else x.sum(),
    ],
)
def test_op_gradients_match_finite_differences(build):
    x = ad.parameter(np.random.default_rng(7).normal(size=5))
    assert ad.finite_difference_check(build, x) <= 1e-4


def test_matmul_and_gather_gradients():
    rng = np.random.default_rng(1)
    w = ad.parameter(rng.normal(size=(4, 3)))
    a = rng.normal(size=(2, 4))
    idx = np.array([[0, 2], [1, 1]])

    def build(p):
        y = ad.matmul(ad.tensor(a), p)
        return ad.take_along_rows(y, idx).sum()

    assert ad.finite_difference_check(build, w) <= 1e-4

    v = ad.parameter(rng.normal(size=6))
    assert ad.finite_difference_check(lambda p: ad.take(p, np.array([0, 5, 5, 2])).sum(), v) <= 1e-4
    assert (
        ad.finite_difference_check(
            lambda p: ad.scatter_sum(p * 2.0, np.array([0, 1, 0, 2, 1, 0]), 3).sum(), v
        )
        <= 1e-4
    )


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=4)
    a, b = 2.5, -0.7

    def f(p):
        return ad.logsumexp(p * 1.3)

    def g(p):
        return (ad.tanh(p) * p).sum()

    x = ad.parameter(x0)
    (gf,) = grad_of(lambda: f(x), [x])
    (gg,) = grad_of(lambda: g(x), [x])
    (gc,) = grad_of(lambda: f(x) * a + g(x) * b, [x])
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-14)


def test_gradient_accumulates_over_multiple_uses():
    x = ad.parameter(np.array([1.5]))
    (g,) = grad_of(lambda: x * x + x * 3.0, [x])
    np.testing.assert_allclose(g, [2 * 1.5 + 3.0])


def test_backward_deterministic_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        mlp = Mlp([3, 16, 2], rng)
        x = rng.normal(size=(10, 3))
        with ad.Tape() as tape:
            loss = ad.logsumexp(mlp(ad.tensor(x))).sum()
        tape.backward(loss)
        return [p.grad.copy() for p in mlp.params]

    for g1, g2 in zip(run(), run()):
        assert np.array_equal(g1, g2)


def test_detach_blocks_gradient():
    x = ad.parameter(np.array([2.0]))
    (g,) = grad_of(lambda: (x.detach() * x).sum(), [x])
    np.testing.assert_allclose(g, [2.0])


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.tensor([1.0, 2.0]) + ad.tensor([1.0, 2.0, 3.0])

    def test_matmul_requires_2d(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.tensor([1.0, 2.0]), ad.tensor([[1.0], [2.0]]))

    def test_non_finite_result_raises(self):
        with pytest.raises(FloatingPointError):
            ad.log(ad.tensor([0.0]))

    def test_backward_requires_scalar(self):
        with ad.Tape() as tape:
            x = ad.parameter(np.ones(3))
            y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_record_consumed_once(self):
        with ad.Tape() as tape:
            x = ad.parameter(np.ones(3))
            y = x.sum()
        tape.backward(y)
        with pytest.raises(RuntimeError):
            tape.backward(y)

    def test_loss_without_record(self):
        x = ad.parameter(np.ones(3))
        y = x.sum()  # no tape active
        with pytest.raises(RuntimeError):
            ad.backward(y)


def test_finite_difference_check_quadratic():
    x = ad.parameter(np.array([3.0]))
    err = ad.finite_difference_check(lambda p: (p * p).sum(), x)
    assert err <= 1e-6


def test_backward_returns_node_id_map():
    with ad.Tape() as tape:
        x = ad.parameter(np.array([1.0, 2.0]))
        y = (x * x).sum()
    grads = tape.backward(y)
    assert x.node_id in grads
    np.testing.assert_allclose(grads[x.node_id], [2.0, 4.0])

"""Small feed-forward and recurrent building blocks on top of the tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_linear(rng, fan_in, fan_out):
    """Weight ~ N(0, 1/fan_in) and zero bias, suitable for tanh stacks."""
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return ad.parameter(w), ad.parameter(b)


def linear(x, w, b):
    """x @ w + b with the bias broadcast made explicit."""
    y = ad.matmul(x, w)
    return y + ad.broadcast_to(ad.reshape(b, (1, b.shape[0])), y.shape)


class Mlp:
    """Fully-connected tanh network; linear final layer."""

    def __init__(self, sizes, rng):
        self.sizes = list(sizes)
        self.layers = [init_linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def params(self):
        return [p for pair in self.layers for p in pair]

    def __call__(self, x):
        for i, (w, b) in enumerate(self.layers):
            x = linear(x, w, b)
            if i < len(self.layers) - 1:
                x = ad.tanh(x)
        return x


class RnnCell:
    """Plain tanh recurrence: h' = tanh(x @ W_in + h @ W_h + b)."""

    def __init__(self, input_size, hidden_size, rng):
        self.hidden_size = hidden_size
        self.w_in, self.b = init_linear(rng, input_size, hidden_size)
        self.w_h = ad.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(hidden_size), size=(hidden_size, hidden_size))
        )

    @property
    def params(self):
        return [self.w_in, self.b, self.w_h]

    def step(self, x, h):
        return ad.tanh(linear(x, self.w_in, self.b) + ad.matmul(h, self.w_h))

    def initial_state(self, batch):
        return ad.tensor(np.zeros((batch, self.hidden_size)))


def flatten_grads(params):
    """Concatenate parameter gradients into one vector (zeros where absent)."""
    parts = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(g.reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def param_vector(params):
    return np.concatenate([p.data.reshape(-1) for p in params]) if params else np.zeros(0)


def set_param_vector(params, vec):
    i = 0
    for p in params:
        n = p.data.size
        p.data = vec[i : i + n].reshape(p.shape).copy()
        i += n

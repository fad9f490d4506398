"""Small layers on top of :mod:`tensor`; weights live in a ParameterStore."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import ParameterStore


class Linear:
    def __init__(self, store: ParameterStore, name: str, n_in: int, n_out: int, rng, gain: float = 2.0):
        std = np.sqrt(gain / n_in)
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, (n_in, n_out)))
        self.b = store.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x):
        return T.matmul(x, self.w) + self.b


class Conv3x3:
    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int, rng, stride=1, padding="zeros"):
        std = np.sqrt(2.0 / (9 * c_in))
        self.w = store.add(f"{name}.w", rng.normal(0.0, std, (3, 3, c_in, c_out)))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d_3x3(x, self.w, self.stride, self.padding) + self.b


class MLP:
    """Linear layers with ReLU between them (and after the last one if
    ``final_relu``)."""

    def __init__(self, store, name, sizes, rng, final_relu=False, last_gain=1.0):
        n = len(sizes) - 1
        self.layers = [
            Linear(store, f"{name}.{i}", sizes[i], sizes[i + 1], rng, gain=2.0 if (i < n - 1 or final_relu) else last_gain)
            for i in range(n)
        ]
        self.final_relu = final_relu

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = T.relu(x)
        return x

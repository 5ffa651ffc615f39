"""Fully connected network with manual backpropagation."""
from __future__ import annotations

import numpy as np

Array = np.ndarray

_ACT = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "linear": (lambda z: z, lambda y: np.ones_like(y)),
}


class MLP:
    """Dense layers ``sizes[0] -> ... -> sizes[-1]``; hidden activation, linear output.

    Weights are stored as (out, in) matrices.  ``forward`` takes a batch of
    row vectors and returns the outputs plus a cache for ``backward``.
    """

    def __init__(self, sizes, seed: int = 0, activation: str = "tanh"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in _ACT:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.weights = [rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        self.biases = [np.zeros(o) for o in self.sizes[1:]]

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes = self.sizes
        new.activation = self.activation
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, X):
        act, _ = _ACT[self.activation]
        h = np.atleast_2d(X)
        cache = [h]
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            h = z if k == last else act(z)
            cache.append(h)
        return h, cache

    def backward(self, cache, dY):
        """Gradients (dW, db) per layer for upstream gradient dY of the output."""
        _, dact = _ACT[self.activation]
        grads = []
        delta = dY
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = cache[k]
            grads.append((delta.T @ h_in, delta.sum(axis=0)))
            if k > 0:
                delta = (delta @ self.weights[k]) * dact(cache[k])
        return grads[::-1]

    def input_jacobian(self, x) -> Array:
        """d output / d input at a single input (out x in)."""
        _, dact = _ACT[self.activation]
        _, cache = self.forward(x)
        J = self.weights[-1]
        for k in range(len(self.weights) - 2, -1, -1):
            J = (J * dact(cache[k + 1][0])) @ self.weights[k]
        return J

    def flat(self) -> Array:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_flat(self, v) -> None:
        k = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = v[k:k + w.size].reshape(w.shape)
            k += w.size
            b[...] = v[k:k + b.size]
            k += b.size

    @staticmethod
    def flatten_grads(grads) -> Array:
        return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])

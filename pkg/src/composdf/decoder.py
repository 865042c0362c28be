"""Shallow MLP mapping interpolated features to a scalar signed distance.

Two ReLU hidden layers of equal width and a linear scalar head. Forward
returns a cache of pre-activations; backward consumes it and produces both
parameter gradients and the gradient with respect to the input feature,
which the caller routes into the feature representation's backward.

The network is small enough that plain matmuls outperform any framework
overhead at the batch sizes used here, and keeping the backward explicit
lets training run in either float32 or float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN_WIDTH = 32


def _he_uniform(rng, fan_in, shape, dtype):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class SdfDecoder:
    """Feature (N,D) -> signed distance value (N,), with manual gradients."""

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, w1, b1, w2, b2, w3, b3):
        self.w1 = np.asarray(w1)
        self.b1 = np.asarray(b1)
        self.w2 = np.asarray(w2)
        self.b2 = np.asarray(b2)
        self.w3 = np.asarray(w3)
        self.b3 = np.asarray(b3)
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, h) or self.b2.shape != (h,):
            raise ValueError("hidden layer shapes are inconsistent")
        if self.w3.shape != (h, 1) or self.b3.shape != (1,):
            raise ValueError("output head must map hidden width to one scalar")

    @classmethod
    def random(cls, dim, rng, hidden=HIDDEN_WIDTH, dtype=np.float32):
        return cls(
            _he_uniform(rng, dim, (dim, hidden), dtype),
            np.zeros(hidden, dtype=dtype),
            _he_uniform(rng, hidden, (hidden, hidden), dtype),
            np.zeros(hidden, dtype=dtype),
            _he_uniform(rng, hidden, (hidden, 1), dtype),
            np.zeros(1, dtype=dtype),
        )

    @property
    def dim(self):
        return self.w1.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[1]

    @property
    def n_params(self):
        return sum(getattr(self, n).size for n in self.PARAM_NAMES)

    def byte_size(self):
        return self.n_params * 4

    def param_arrays(self):
        """Ordered (name, array) view used by the optimizer and checkpoint."""
        return [(n, getattr(self, n)) for n in self.PARAM_NAMES]

    def forward(self, z):
        z = np.asarray(z)
        h1 = z @ self.w1 + self.b1
        a1 = np.maximum(h1, 0.0)
        h2 = a1 @ self.w2 + self.b2
        a2 = np.maximum(h2, 0.0)
        phi = (a2 @ self.w3)[:, 0] + self.b3[0]
        return phi, (z, h1, a1, h2, a2)

    def backward(self, cache, grad_phi):
        """Returns (DecoderGrads, grad wrt the input features)."""
        z, h1, a1, h2, a2 = cache
        g3 = np.asarray(grad_phi)[:, None].astype(z.dtype, copy=False)
        gw3 = a2.T @ g3
        gb3 = g3.sum(axis=0)
        gh2 = (g3 @ self.w3.T) * (h2 > 0)
        gw2 = a1.T @ gh2
        gb2 = gh2.sum(axis=0)
        gh1 = (gh2 @ self.w2.T) * (h1 > 0)
        gw1 = z.T @ gh1
        gb1 = gh1.sum(axis=0)
        gz = gh1 @ self.w1.T
        return DecoderGrads(gw1, gb1, gw2, gb2, gw3, gb3), gz


@dataclass
class DecoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def zeros_like(cls, dec: SdfDecoder):
        return cls(*(np.zeros_like(getattr(dec, n)) for n in SdfDecoder.PARAM_NAMES))

    def arrays(self):
        return [(n, getattr(self, n)) for n in SdfDecoder.PARAM_NAMES]

    def add_(self, other: "DecoderGrads"):
        for n in SdfDecoder.PARAM_NAMES:
            getattr(self, n).__iadd__(getattr(other, n))
        return self

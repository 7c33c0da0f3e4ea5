"""Adam with decoupled weight decay, plus the NaN-gradient stabilizer."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

STABILIZE_EPS = 1e-7


class Adam:
    """Decoupled-weight-decay Adam over a fixed list of leaf tensors.

    Parameter updates assign fresh arrays (no in-place mutation), so values
    captured earlier on a tape are never silently rewritten.
    """

    def __init__(self, params, lr=3e-4, weight_decay=1e-4,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict):
        """Apply one update from a gradient map produced by backward()."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = grads[p].data
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = p.data - update


def stabilize_gradients(grads: dict, rng: np.random.Generator) -> dict:
    """Replace poisoned entries of NaN-containing gradients with tiny noise.

    Only tensors that contain at least one NaN are touched; within those,
    entries that are NaN or exactly zero become uniform draws from [0, 1)
    scaled by 1e-7. Clean tensors pass through bit-identical, and a fully
    clean map never consumes random numbers.
    """
    poisoned = [p for p, g in grads.items() if np.isnan(g.data).any()]
    if not poisoned:
        return grads
    out = dict(grads)
    for p in poisoned:
        g = out[p].data
        mask = np.isnan(g) | (g == 0.0)
        replacement = rng.random(g.shape) * STABILIZE_EPS
        out[p] = Tensor(np.where(mask, replacement, g))
    return out

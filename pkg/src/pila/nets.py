"""Shared building blocks for the encoder networks."""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc

FEATURE_DIM = 128


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int,
                std: float | None = None):
    """Weight/bias pair; fan-in-scaled normal weights, zero bias."""
    if std is None:
        std = math.sqrt(1.0 / fan_in)
    w = dc.Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)))
    b = dc.Tensor(np.zeros(fan_out))
    return w, b


def affine(x: dc.Tensor, w: dc.Tensor, b: dc.Tensor) -> dc.Tensor:
    return dc.add(dc.matmul(x, w), b)


def feature_extractor_init(rng, d_in: int, params: dict, prefix: str = "er"):
    """Two tanh hidden layers of width FEATURE_DIM feeding the heads."""
    params[f"{prefix}_w1"], params[f"{prefix}_b1"] = linear_init(rng, d_in, FEATURE_DIM)
    params[f"{prefix}_w2"], params[f"{prefix}_b2"] = linear_init(rng, FEATURE_DIM, FEATURE_DIM)


def feature_extractor(x: dc.Tensor, params: dict, prefix: str = "er") -> dc.Tensor:
    h = dc.tanh(affine(x, params[f"{prefix}_w1"], params[f"{prefix}_b1"]))
    return dc.tanh(affine(h, params[f"{prefix}_w2"], params[f"{prefix}_b2"]))


class Standardizer:
    """Per-dimension z-scoring with frozen training-set statistics."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        return cls(values.mean(axis=0), values.std(axis=0))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def apply_tape(self, t: dc.Tensor) -> dc.Tensor:
        return dc.div(dc.sub(t, dc.Tensor(self.mean)), dc.Tensor(self.std))


def check_finite_rows(values: np.ndarray, what: str):
    bad = ~np.isfinite(values).all(axis=tuple(range(1, values.ndim)))
    if bad.any():
        idx = int(np.nonzero(bad)[0][0])
        raise ValueError(f"{what}: non-finite values at sample index {idx}")

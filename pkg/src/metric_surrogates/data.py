"""Synthetic datasets: Gaussian class clusters and a noisy string task."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .metrics import SymbolSeq

__all__ = ["gen_gaussian_classes", "gen_string_task", "rng_stream"]

_STREAMS = {"data": 0, "init": 1, "sampler": 2, "simix": 3}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named random stream so toggling one consumer never perturbs another."""
    if name not in _STREAMS:
        raise ValueError(f"unknown stream {name!r}, expected one of {sorted(_STREAMS)}")
    return np.random.default_rng([int(seed), _STREAMS[name]])


def gen_gaussian_classes(classes: int, per_class: int, dim: int, sigma: float,
                         seed_or_rng) -> tuple[Tensor, np.ndarray]:
    """Class means uniform on the unit sphere, points mean + N(0, sigma^2 I).

    Returns unnormalized features (n, dim) and integer labels.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1 or dim < 1:
        raise ValueError("per_class and dim must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = (np.random.default_rng(seed_or_rng)
           if isinstance(seed_or_rng, (int, np.integer)) else seed_or_rng)
    means = rng.standard_normal((classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    feats = np.repeat(means, per_class, axis=0)
    feats = feats + sigma * rng.standard_normal(feats.shape)
    labels = np.repeat(np.arange(classes), per_class)
    return Tensor(feats), labels


def gen_string_task(n: int, length: int, alphabet: int, noise: float,
                    seed_or_rng) -> list[tuple[Tensor, SymbolSeq]]:
    """Uniform random sequences with noisy one-hot features.

    Each sample is ``(features, gt)`` where features are the one-hot encoding
    of the ground truth plus N(0, noise^2) entries; at zero noise a linear
    readout recovers the sequence exactly.
    """
    if n < 1 or length < 1:
        raise ValueError("n and length must be positive")
    if alphabet < 2:
        raise ValueError("alphabet must be at least 2")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = (np.random.default_rng(seed_or_rng)
           if isinstance(seed_or_rng, (int, np.integer)) else seed_or_rng)
    out = []
    for _ in range(n):
        symbols = tuple(int(s) for s in rng.integers(alphabet, size=length))
        gt = SymbolSeq(symbols, alphabet)
        feats = np.zeros((length, alphabet))
        feats[np.arange(length), symbols] = 1.0
        feats = feats + noise * rng.standard_normal(feats.shape)
        out.append((Tensor(feats), gt))
    return out

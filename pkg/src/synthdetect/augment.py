"""Latent noise augmentation: double a bank with perturbed copies.

Each sample gets one perturbed twin ``f + beta * eta`` where
``eta = sigma * standard_normal(dim)`` and ``sigma`` is drawn uniformly from
[0, 1) per sample. Perturbed copies keep the label of their source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import FeatureBank


@dataclass(frozen=True)
class AugmentConfig:
    beta: float = 0.5
    seed: int = 8079

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")


@dataclass(frozen=True)
class NoiseDraw:
    sigma: float
    eta: np.ndarray


def draw_noise(dim: int, rng: np.random.Generator) -> NoiseDraw:
    """One noise vector: sigma ~ U[0,1), eta ~ N(0, sigma^2 I)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    sigma = float(rng.random())
    eta = sigma * rng.standard_normal(dim)
    return NoiseDraw(sigma=sigma, eta=eta)


def augment_bank(bank: FeatureBank, config: AugmentConfig) -> FeatureBank:
    """Return a bank holding the originals followed by one perturbed copy each.

    Sample i's twin sits at index n + i with the same label. The noise for
    sample i comes from its own substream seeded by (config.seed, i), so the
    result does not depend on bank iteration order internals.
    """
    n, dim = bank.n_samples, bank.dim
    perturbed = np.empty((n, dim), dtype=np.float32)
    base = bank.features.astype(np.float64)
    for i in range(n):
        rng = np.random.default_rng([config.seed, i])
        noise = draw_noise(dim, rng)
        perturbed[i] = (base[i] + config.beta * noise.eta).astype(np.float32)
    features = np.concatenate([bank.features, perturbed])
    labels = np.concatenate([bank.labels, bank.labels])
    return FeatureBank(features, labels)

"""Quantization, discretized likelihoods, and rate accounting.

The main latent is modeled per element as a Gaussian with predicted mean and
scale, integrated over unit bins; the hyper latent uses a per-channel
logistic prior.  Both likelihoods are floored at 2**-16 so that every symbol
in the [-255, 255] alphabet stays codable by the 16-bit range coder.

Numpy functions serve the coding/evaluation path; the ``*_bits`` functions
build the same math from tape operations for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from . import tensor as T
from .rand import rng_from

SIGMA_MIN = 0.11
PROB_FLOOR = 2.0 ** -16
SYMBOL_MIN = -255
SYMBOL_MAX = 255
ALPHABET = SYMBOL_MAX - SYMBOL_MIN + 1  # 511 symbols, escape-free

_LN2 = math.log(2.0)


@dataclass
class EntropyParams:
    """Per-element mean and scale for the main latent; scale is floored."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), SIGMA_MIN)
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu/sigma shape mismatch: {self.mu.shape} vs {self.sigma.shape}")


@dataclass
class FactorizedPrior:
    """Per-channel logistic location and scale for the hyper latent."""

    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.loc = np.asarray(self.loc, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.loc.shape != self.scale.shape or self.loc.ndim != 1:
            raise ValueError("prior loc/scale must be equal-length vectors")
        if np.any(self.scale <= 0.0):
            raise ValueError("prior scales must be positive")


def quantize(x) -> np.ndarray:
    """Round half away from zero, clamped to the [-255, 255] alphabet."""
    x = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    return np.clip(T.round_half_away(x), SYMBOL_MIN, SYMBOL_MAX).astype(np.int32)


def train_perturb(x, seed: int) -> np.ndarray:
    """x + u with u ~ U[-0.5, 0.5) i.i.d.; |out - in| < 0.5 strictly."""
    x = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    u = rng_from(seed).random(x.shape) - 0.5
    u = np.where(u == -0.5, 0.0, u)  # keep the bound strict on the closed edge
    return x + u


def gaussian_likelihood(symbols, params: EntropyParams) -> np.ndarray:
    """P(symbol) under the discretized Gaussian, floored at 2**-16."""
    v = np.asarray(symbols, dtype=np.float64)
    upper = ndtr((v + 0.5 - params.mu) / params.sigma)
    lower = ndtr((v - 0.5 - params.mu) / params.sigma)
    return np.maximum(upper - lower, PROB_FLOOR)


def factorized_likelihood(symbols, prior: FactorizedPrior) -> np.ndarray:
    """P(symbol) under the per-channel logistic prior; channels on the last axis."""
    v = np.asarray(symbols, dtype=np.float64)
    if v.shape[-1] != prior.loc.size:
        raise ValueError(f"last axis {v.shape[-1]} != prior channels {prior.loc.size}")
    upper = expit((v + 0.5 - prior.loc) / prior.scale)
    lower = expit((v - 0.5 - prior.loc) / prior.scale)
    return np.maximum(upper - lower, PROB_FLOOR)


@dataclass(frozen=True)
class RateSummary:
    bits_y: float
    bits_z: float
    bpp: float

    @property
    def bits_total(self) -> float:
        return self.bits_y + self.bits_z


def rate_estimate(p_y: np.ndarray, p_z: np.ndarray, num_pixels: int) -> RateSummary:
    """Information content of both latents: bits = sum(-log2 P)."""
    bits_y = float(-np.log2(p_y).sum())
    bits_z = float(-np.log2(p_z).sum())
    return RateSummary(bits_y=bits_y, bits_z=bits_z, bpp=(bits_y + bits_z) / num_pixels)


def gaussian_alphabet_probs(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """(n,) means/scales -> (n, 511) floored bin probabilities over the alphabet."""
    mu = mu.reshape(-1, 1)
    sigma = np.maximum(sigma.reshape(-1, 1), SIGMA_MIN)
    edges = np.arange(SYMBOL_MIN, SYMBOL_MAX + 2, dtype=np.float64) - 0.5  # 512 edges
    cdf = ndtr((edges - mu) / sigma)
    return np.maximum(np.diff(cdf, axis=1), PROB_FLOOR)


def logistic_alphabet_probs(prior: FactorizedPrior) -> np.ndarray:
    """(channels, 511) floored bin probabilities over the alphabet."""
    loc = prior.loc.reshape(-1, 1)
    scale = prior.scale.reshape(-1, 1)
    edges = np.arange(SYMBOL_MIN, SYMBOL_MAX + 2, dtype=np.float64) - 0.5
    cdf = expit((edges - loc) / scale)
    return np.maximum(np.diff(cdf, axis=1), PROB_FLOOR)


# ---------------------------------------------------------------------------
# differentiable rate terms (training path)
# ---------------------------------------------------------------------------

def gaussian_bits(values: T.Tensor, mu: T.Tensor, sigma: T.Tensor) -> T.Tensor:
    """sum(-log2 P(values)) under the discretized Gaussian; all tape ops."""
    sig = T.clamp_min(sigma, SIGMA_MIN)
    upper = T.gauss_cdf(T.div(T.sub(T.add(values, 0.5), mu), sig))
    lower = T.gauss_cdf(T.div(T.sub(T.add(values, -0.5), mu), sig))
    p = T.clamp_min(T.sub(upper, lower), PROB_FLOOR)
    return T.mul(T.tsum(T.log(p)), -1.0 / _LN2)


def logistic_bits(values: T.Tensor, loc: T.Tensor, scale: T.Tensor) -> T.Tensor:
    """sum(-log2 P(values)) under the per-channel logistic prior."""
    upper = T.sigmoid(T.div(T.sub(T.add(values, 0.5), loc), scale))
    lower = T.sigmoid(T.div(T.sub(T.add(values, -0.5), loc), scale))
    p = T.clamp_min(T.sub(upper, lower), PROB_FLOOR)
    return T.mul(T.tsum(T.log(p)), -1.0 / _LN2)

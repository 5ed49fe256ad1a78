"""Batch-noise model for stochastic gradients.

Per-example gradient noise is multivariate Student-t with ``nu`` degrees of
freedom (``nu = math.inf`` recovers the Gaussian case); batch-averaged noise
is Gaussian with scale ``sigma_gamma / sqrt(B)``.  The constant

    K(nu) = sqrt(2/nu) * Gamma((nu+1)/2) / Gamma(nu/2)

relates the mean of a normalized noisy gradient to the true gradient:
E[X/||X||] ~= K(nu) * g / (sigma * sqrt(d)) for X ~ t_nu(g, sigma^2 I_d),
valid when d is large and ||g||^2 / (2 sigma^2) << d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "NoiseSpec",
    "k_of_nu",
    "sample_per_example_noise",
    "sample_batch_noise",
    "normalized_gradient_mean",
]


@dataclass(frozen=True)
class NoiseSpec:
    """Gradient-noise configuration.

    sigma_gamma: per-example noise scale (>= 0).
    nu: Student-t degrees of freedom, > 0; ``math.inf`` means Gaussian.
        No silent thresholding: a large finite nu stays Student-t.
    batch_size: mini-batch size B >= 1.
    """

    sigma_gamma: float
    nu: float = math.inf
    batch_size: int = 1

    def __post_init__(self) -> None:
        if self.sigma_gamma < 0:
            raise ValueError(f"sigma_gamma must be >= 0, got {self.sigma_gamma}")
        if not self.nu > 0:
            raise ValueError(f"nu must be > 0, got {self.nu}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def k_of_nu(nu: float) -> float:
    """Normalization constant K(nu); exactly 1.0 in the Gaussian limit nu=inf."""
    if not nu > 0:
        raise ValueError(f"nu must be > 0, got {nu}")
    if math.isinf(nu):
        return 1.0
    # gammaln keeps this finite for large nu where Gamma itself overflows.
    return math.sqrt(2.0 / nu) * math.exp(
        special.gammaln((nu + 1.0) / 2.0) - special.gammaln(nu / 2.0)
    )


def _shape(size, d: int) -> tuple:
    if size is None:
        return (d,)
    if np.isscalar(size):
        return (int(size), d)
    return tuple(size) + (d,)


def sample_per_example_noise(
    spec: NoiseSpec, d: int, rng: np.random.Generator, size=None
) -> np.ndarray:
    """Draw sigma_gamma * t_nu(0, I_d) noise; shape ``size + (d,)``.

    Finite nu uses the normal/chi-square ratio representation
    z / sqrt(chi2_nu / nu), which is exact for every nu > 0.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    shape = _shape(size, d)
    if spec.sigma_gamma == 0.0:
        return np.zeros(shape)
    z = rng.standard_normal(shape)
    if math.isinf(spec.nu):
        return spec.sigma_gamma * z
    s = rng.chisquare(spec.nu, shape[:-1] + (1,))
    return spec.sigma_gamma * z / np.sqrt(s / spec.nu)


def sample_batch_noise(
    spec: NoiseSpec, d: int, rng: np.random.Generator, size=None
) -> np.ndarray:
    """Draw (sigma_gamma / sqrt(B)) * N(0, I_d) batch-averaged noise."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    shape = _shape(size, d)
    scale = spec.sigma_gamma / math.sqrt(spec.batch_size)
    if scale == 0.0:
        return np.zeros(shape)
    return scale * rng.standard_normal(shape)


def normalized_gradient_mean(g: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Leading-order mean of the normalized noisy gradient: K(nu) g / (sigma sqrt(d)).

    Rejects sigma_gamma = 0, where the formula is singular.
    """
    if spec.sigma_gamma <= 0:
        raise ValueError("normalized_gradient_mean requires sigma_gamma > 0")
    g = np.asarray(g, dtype=float)
    d = g.shape[-1]
    return k_of_nu(spec.nu) * g / (spec.sigma_gamma * math.sqrt(d))

"""Clipping, the Gaussian mechanism, and privacy-budget calibration.

Two calibration modes are exposed:

* analytic ("theory mode"): sigma_dp = q sqrt(T log(1/delta)) / eps with the
  constant fixed to 1, i.e. sigma_dp = sqrt(T) Phi / eps where
  Phi = q sqrt(log(1/delta)).  The round trip eps = sqrt(T) Phi / sigma_dp is
  exact by construction.
* rdp: Renyi-DP accounting of the subsampled Gaussian mechanism at integer
  orders alpha in {2..256}, each step bounded by the binomial expansion

      A_alpha = sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
                exp((k^2 - k) / (2 sigma^2)),
      RDP(alpha) = log(A_alpha) / (alpha - 1),

  composed over T steps and converted with
  eps = min_alpha [ T RDP(alpha) + log(1/delta) / (alpha - 1) ].

log means natural log throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "PrivacyParams",
    "clip",
    "privatize",
    "phi",
    "calibrate_sigma_analytic",
    "epsilon_from_sigma_analytic",
    "rdp_sampled_gaussian",
    "epsilon_of_sigma_rdp",
    "epsilon_star",
    "steps_for_epochs",
    "DEFAULT_RDP_ORDERS",
]

DEFAULT_RDP_ORDERS = tuple(range(2, 257))


def phi(q: float, delta: float) -> float:
    """Phi := q sqrt(log(1/delta)); 0 when q = 0."""
    if q == 0:
        return 0.0
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return q * math.sqrt(math.log(1.0 / delta))


@dataclass(frozen=True)
class PrivacyParams:
    """Privacy budget and mechanism configuration.

    Derived fields: q = B/n exactly, phi = q sqrt(log(1/delta)).
    ``epsilon`` and ``sigma_dp`` are kept mutually consistent under the
    analytic calibration when one of them is omitted.
    """

    delta: float
    n: int
    batch_size: int
    steps: int
    clip_threshold: float
    sigma_dp: float | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.n < 1 or not 1 <= self.batch_size <= self.n:
            raise ValueError("need 1 <= batch_size <= n")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.clip_threshold <= 0:
            raise ValueError("clip threshold must be > 0")
        if self.sigma_dp is None and self.epsilon is None:
            raise ValueError("provide sigma_dp or epsilon")
        if self.sigma_dp is None:
            object.__setattr__(
                self,
                "sigma_dp",
                calibrate_sigma_analytic(self.epsilon, self.delta, self.q, self.steps),
            )
        elif self.sigma_dp < 0:
            raise ValueError("sigma_dp must be >= 0")
        if self.epsilon is None:
            object.__setattr__(
                self,
                "epsilon",
                epsilon_from_sigma_analytic(self.sigma_dp, self.delta, self.q, self.steps),
            )

    @property
    def q(self) -> float:
        return self.batch_size / self.n

    @property
    def phi(self) -> float:
        return phi(self.q, self.delta)


def clip(x: np.ndarray, threshold: float) -> np.ndarray:
    """min{C/||x||_2, 1} x, applied over the last axis; x = 0 maps to 0.

    The comparison carries a few ulps of relative slack so that re-clipping an
    already-clipped vector is an exact fixed point.
    """
    if threshold <= 0:
        raise ValueError(f"clip threshold must be > 0, got {threshold}")
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    over = norm > threshold * (1.0 + 1e-12)
    scale = np.where(over, threshold / np.where(norm == 0, 1.0, norm), 1.0)
    return x * scale


def privatize(
    clipped_sum: np.ndarray,
    batch_size: int,
    threshold: float,
    sigma_dp: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """clipped_sum / B + N(0, C^2 sigma_dp^2 / B^2 I_d)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if sigma_dp < 0:
        raise ValueError("sigma_dp must be >= 0")
    clipped_sum = np.asarray(clipped_sum, dtype=float)
    out = clipped_sum / batch_size
    if sigma_dp > 0:
        out = out + (threshold * sigma_dp / batch_size) * rng.standard_normal(
            clipped_sum.shape
        )
    return out


def calibrate_sigma_analytic(epsilon: float, delta: float, q: float, steps: int) -> float:
    """sigma_dp = q sqrt(T log(1/delta)) / eps, the c2 = 1 shorthand."""
    if epsilon is None or epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if math.isinf(epsilon):
        return 0.0
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return phi(q, delta) * math.sqrt(steps) / epsilon


def epsilon_from_sigma_analytic(sigma_dp: float, delta: float, q: float, steps: int) -> float:
    """Inverse of the analytic calibration: eps = sqrt(T) Phi / sigma_dp."""
    if sigma_dp == 0:
        return math.inf
    return phi(q, delta) * math.sqrt(steps) / sigma_dp


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    lo, hi = min(a, b), max(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def rdp_sampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """One-step RDP of the subsampled Gaussian mechanism at integer order alpha.

    q = 1 reduces to the plain Gaussian mechanism, alpha / (2 sigma^2).
    """
    if not (isinstance(alpha, (int, np.integer)) and alpha >= 2):
        raise ValueError(f"alpha must be an integer >= 2, got {alpha}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    log_a = -math.inf
    for k in range(alpha + 1):
        log_coef = (
            special.gammaln(alpha + 1)
            - special.gammaln(k + 1)
            - special.gammaln(alpha - k + 1)
            + k * math.log(q)
            + (alpha - k) * math.log1p(-q)
        )
        log_a = _log_add(log_a, log_coef + (k * k - k) / (2.0 * sigma**2))
    return log_a / (alpha - 1)


def epsilon_of_sigma_rdp(
    sigma_dp: float,
    delta: float,
    q: float,
    steps: int,
    orders=DEFAULT_RDP_ORDERS,
    return_order: bool = False,
):
    """(eps, delta) spent by T subsampled-Gaussian steps, via RDP composition.

    sigma_dp = 0 returns the infinity sentinel (no noise, no guarantee).
    """
    if sigma_dp == 0:
        return (math.inf, None) if return_order else math.inf
    if sigma_dp < 0:
        raise ValueError("sigma_dp must be >= 0")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    log_inv_delta = math.log(1.0 / delta)
    best, best_order = math.inf, None
    for alpha in orders:
        eps = steps * rdp_sampled_gaussian(q, sigma_dp, alpha) + log_inv_delta / (
            alpha - 1
        )
        if eps < best:
            best, best_order = eps, alpha
    return (best, best_order) if return_order else best


def epsilon_star(
    C: float, T: int, B: int, n: int, sigma_gamma: float, delta: float
) -> float:
    """Critical privacy budget where the two Phase-2 asymptotes cross.

    eps* = sqrt(C^2 T B log(1/delta) / (n^2 (B - sigma_gamma^2))).
    When sigma_gamma^2 >= B the sign-based optimizer dominates at every eps,
    and the threshold is +inf.
    """
    if min(C, T, B, n) <= 0 or sigma_gamma < 0:
        raise ValueError("C, T, B, n must be positive and sigma_gamma >= 0")
    if B > n:
        raise ValueError("need B <= n")
    if sigma_gamma**2 >= B:
        return math.inf
    return math.sqrt(
        C**2 * T * B * math.log(1.0 / delta) / (n**2 * (B - sigma_gamma**2))
    )


def steps_for_epochs(n: int, batch_size: int, epochs: int) -> int:
    """ceil(n / B) * epochs, the epoch-based iteration count."""
    return math.ceil(n / batch_size) * epochs

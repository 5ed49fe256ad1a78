"""Closed-form theory: loss/gradient bounds, stationary moments, optimal
learning rates, and the utility-comparison threshold.

All bounds are evaluated in their formal explicit-constant form (the
appendix versions), never the constant-suppressed main-text form.  The one
exception is :func:`phase2_asymptote_pair`, which returns the pair of
Phase-2 asymptotes on the common normalization used to derive the crossing
threshold eps*; on that normalization the two expressions are exactly equal
at eps = eps*.

Notation: S := sigma_gamma^2/B + C^2 sigma_dp^2/B^2 is the total Phase-2
noise variance per coordinate, Phi := q sqrt(log(1/delta)), and the analytic
calibration sigma_dp = sqrt(T) Phi / eps ties eps to sigma_dp throughout.
log is the natural log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .noise import k_of_nu
from .privacy import (
    calibrate_sigma_analytic,
    epsilon_from_sigma_analytic,
    epsilon_star,
    phi,
)

__all__ = [
    "BoundInputs",
    "lossbound_sgd",
    "lossbound_sign",
    "gradbound_sgd",
    "gradbound_sign",
    "gradbound_sign_mixed",
    "k1",
    "k2",
    "k3",
    "k4",
    "stationary_sgd",
    "stationary_sign",
    "optimal_lr_sgd",
    "optimal_lr_sign",
    "phase2_asymptote_pair",
    "compare_utility",
    "UtilityComparison",
]


@dataclass(frozen=True)
class BoundInputs:
    """Everything the bound formulas consume.

    Exactly one of (epsilon, sigma_dp) may be omitted; the other is filled in
    through the analytic calibration so the two stay consistent.
    """

    f0: float
    mu: float
    L: float
    d: int
    eta: float
    T: int
    B: int
    n: int
    C: float
    sigma_gamma: float
    delta: float
    nu: float = math.inf
    epsilon: float | None = None
    sigma_dp: float | None = None

    def __post_init__(self):
        if self.sigma_dp is None and self.epsilon is None:
            raise ValueError("provide epsilon or sigma_dp")
        if self.sigma_dp is None:
            object.__setattr__(
                self,
                "sigma_dp",
                calibrate_sigma_analytic(self.epsilon, self.delta, self.q, self.T),
            )
        if self.epsilon is None:
            object.__setattr__(
                self,
                "epsilon",
                epsilon_from_sigma_analytic(self.sigma_dp, self.delta, self.q, self.T),
            )

    @property
    def q(self) -> float:
        return self.B / self.n

    @property
    def phi(self) -> float:
        return phi(self.q, self.delta)

    @property
    def tau(self) -> float:
        return self.eta * self.T

    @property
    def total_variance(self) -> float:
        """S = sigma_gamma^2/B + C^2 sigma_dp^2/B^2."""
        return self.sigma_gamma**2 / self.B + (self.C * self.sigma_dp / self.B) ** 2

    def at_epsilon(self, eps: float) -> "BoundInputs":
        """Same inputs with the budget moved to eps (sigma_dp recalibrated)."""
        return replace(self, epsilon=eps, sigma_dp=None)


def _mix(f0: float, rate: float, asymptote: float, t: float) -> float:
    decay = math.exp(-rate * t)
    return f0 * decay + (1.0 - decay) * asymptote


def lossbound_sgd(inputs: BoundInputs, t: float, phase: int) -> float:
    """Expected-loss bound for DP-SGD under mu-PL + L-smoothness.

    Phase 1: decay rate 2 mu K(nu) C / (sigma_gamma sqrt(d)), asymptote
    (eta d^{3/2} L sigma_gamma / (4 mu C K(nu))) (C^2/(Bd) + C^2 sigma_dp^2/B^2).
    Phase 2: decay rate 2 mu, asymptote (eta d L / (4 mu)) S.
    """
    if inputs.mu <= 0:
        raise ValueError("loss bound needs mu > 0")
    if t < 0:
        raise ValueError("t must be >= 0")
    d, C, B = inputs.d, inputs.C, inputs.B
    if phase == 1:
        if inputs.sigma_gamma <= 0:
            raise ValueError("phase 1 needs sigma_gamma > 0")
        kv = k_of_nu(inputs.nu)
        rate = 2.0 * inputs.mu * kv * C / (inputs.sigma_gamma * math.sqrt(d))
        asym = (
            inputs.eta
            * d**1.5
            * inputs.L
            * inputs.sigma_gamma
            / (4.0 * inputs.mu * C * kv)
        ) * (C**2 / (B * d) + (C * inputs.sigma_dp / B) ** 2)
    elif phase == 2:
        rate = 2.0 * inputs.mu
        asym = inputs.eta * d * inputs.L / (4.0 * inputs.mu) * inputs.total_variance
    else:
        raise ValueError("phase must be 1 or 2")
    return _mix(inputs.f0, rate, asym, t)


def lossbound_sign(inputs: BoundInputs, t: float, phase: int) -> float:
    """Expected-loss bound for DP-SignSGD under mu-PL + L-smoothness.

    Phase 1: decay rate 2 mu sqrt(2/(d pi T)) (K(nu)/sigma_gamma)
    (B eps / (q log(1/delta))), asymptote sqrt(pi T / 2)
    (eta d^{3/2} L sigma_gamma / (4 mu K(nu))) (q log(1/delta) / (B eps)).
    Phase 2: decay rate 2 sqrt(2/pi) mu / sqrt(S), asymptote
    sqrt(pi/2) (eta d L / (4 mu)) sqrt(S).
    """
    if inputs.mu <= 0:
        raise ValueError("loss bound needs mu > 0")
    if t < 0:
        raise ValueError("t must be >= 0")
    d = inputs.d
    if phase == 1:
        if inputs.sigma_gamma <= 0:
            raise ValueError("phase 1 needs sigma_gamma > 0")
        if not (inputs.epsilon and math.isfinite(inputs.epsilon)):
            raise ValueError("phase 1 needs a finite positive epsilon")
        kv = k_of_nu(inputs.nu)
        log_term = inputs.q * math.log(1.0 / inputs.delta)
        rate = (
            2.0
            * inputs.mu
            * math.sqrt(2.0 / (d * math.pi * inputs.T))
            * (kv / inputs.sigma_gamma)
            * inputs.B
            * inputs.epsilon
            / log_term
        )
        asym = (
            math.sqrt(math.pi * inputs.T / 2.0)
            * inputs.eta
            * d**1.5
            * inputs.L
            * inputs.sigma_gamma
            / (4.0 * inputs.mu * kv)
            * log_term
            / (inputs.B * inputs.epsilon)
        )
    elif phase == 2:
        s = math.sqrt(inputs.total_variance)
        if s <= 0:
            raise ValueError("phase 2 needs positive total noise")
        rate = 2.0 * math.sqrt(2.0 / math.pi) * inputs.mu / s
        asym = math.sqrt(math.pi / 2.0) * inputs.eta * d * inputs.L / (4.0 * inputs.mu) * s
    else:
        raise ValueError("phase must be 1 or 2")
    return _mix(inputs.f0, rate, asym, t)


def k1(inputs: BoundInputs) -> float:
    """max{1, sigma_gamma sqrt(d) / (C K(nu))}."""
    return max(
        1.0,
        inputs.sigma_gamma * math.sqrt(inputs.d) / (inputs.C * k_of_nu(inputs.nu)),
    )


def k2(inputs: BoundInputs) -> float:
    """max{C^2/(B d), sigma_gamma^2/B}."""
    return max(inputs.C**2 / (inputs.B * inputs.d), inputs.sigma_gamma**2 / inputs.B)


def k3(inputs: BoundInputs) -> float:
    """max{sqrt(d pi/2) sigma_gamma Phi / (B K(nu)), sqrt(pi/2) sqrt(S_T)} with
    S_T = eps^2 sigma_gamma^2/(B T) + C^2 Phi^2/B^2."""
    st = (inputs.epsilon * inputs.sigma_gamma) ** 2 / (inputs.B * inputs.T) + (
        inputs.C * inputs.phi / inputs.B
    ) ** 2
    return max(
        math.sqrt(inputs.d * math.pi / 2.0)
        * inputs.sigma_gamma
        * inputs.phi
        / (inputs.B * k_of_nu(inputs.nu)),
        math.sqrt(math.pi / 2.0) * math.sqrt(st),
    )


def k4(inputs: BoundInputs) -> float:
    """max{sqrt(pi d/2) sigma_gamma Phi / (B K(nu)), sqrt(pi/2) C Phi / B}."""
    return max(
        math.sqrt(math.pi * inputs.d / 2.0)
        * inputs.sigma_gamma
        * inputs.phi
        / (inputs.B * k_of_nu(inputs.nu)),
        math.sqrt(math.pi / 2.0) * inputs.C * inputs.phi / inputs.B,
    )


def gradbound_sgd(inputs: BoundInputs) -> float:
    """K1 (f0/(eta T) + (eta d L / 2)(K2 + C^2 sigma_dp^2 / B^2))."""
    dp = (inputs.C * inputs.sigma_dp / inputs.B) ** 2
    return k1(inputs) * (
        inputs.f0 / (inputs.eta * inputs.T)
        + inputs.eta * inputs.d * inputs.L / 2.0 * (k2(inputs) + dp)
    )


def _gradbound_sign_generic(inputs: BoundInputs, constant: float) -> float:
    if not (inputs.epsilon and math.isfinite(inputs.epsilon)):
        raise ValueError("sign gradient bound needs a finite positive epsilon")
    root_t = math.sqrt(inputs.T)
    return (
        constant
        * (
            inputs.f0 / (inputs.eta * root_t)
            + inputs.eta * inputs.d * inputs.L * root_t / 2.0
        )
        / inputs.epsilon
    )


def gradbound_sign(inputs: BoundInputs) -> float:
    """K3 (f0/(eta sqrt(T)) + eta d L sqrt(T)/2) / eps."""
    return _gradbound_sign_generic(inputs, k3(inputs))


def gradbound_sign_mixed(inputs: BoundInputs) -> float:
    """K4 (f0/(eta sqrt(T)) + eta d L sqrt(T)/2) / eps; K4 <= K3 always."""
    return _gradbound_sign_generic(inputs, k4(inputs))


def stationary_sgd(eigenvalues, x0, inputs: BoundInputs, t: float):
    """Per-mode mean and variance of DP-SGD on f = 1/2 x^T diag(lam) x.

    mean_i = x0_i exp(-lam_i t);
    var_i = (eta / (2 lam_i)) S (1 - exp(-2 lam_i t)).  Needs lam_i > 0.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("stationary moments need lam_i > 0")
    mean = x0 * np.exp(-lam * t)
    var = inputs.eta / (2.0 * lam) * inputs.total_variance * (1.0 - np.exp(-2.0 * lam * t))
    return mean, var


def sign_drift_constant(inputs: BoundInputs) -> float:
    """K = sqrt(2/pi) / sqrt(S), the linearized Phase-2 sign drift scale."""
    s = math.sqrt(inputs.total_variance)
    if s <= 0:
        raise ValueError("sign drift constant needs positive total noise")
    return math.sqrt(2.0 / math.pi) / s


def stationary_sign(eigenvalues, x0, inputs: BoundInputs, t: float):
    """Per-mode mean and variance of Phase-2 DP-SignSGD on a diagonal quadratic.

    mean_i = x0_i exp(-K lam_i t);
    var_i = x0_i^2 e^{-2 K lam_i t} (e^{-eta K^2 lam_i^2 t} - 1)
            + eta (1 - e^{-(2 K lam_i + eta K^2 lam_i^2) t})
              / (2 K lam_i + eta K^2 lam_i^2).
    """
    lam = np.asarray(eigenvalues, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("stationary moments need lam_i > 0")
    K = sign_drift_constant(inputs)
    a = 2.0 * K * lam
    b = inputs.eta * (K * lam) ** 2
    mean = x0 * np.exp(-K * lam * t)
    var = x0**2 * np.exp(-a * t) * (np.exp(-b * t) - 1.0) + inputs.eta * (
        1.0 - np.exp(-(a + b) * t)
    ) / (a + b)
    return mean, var


def optimal_lr_sgd(inputs: BoundInputs):
    """eta* = min{sqrt(f0/(d L T sigma_gamma^2)), sqrt(f0/(d L)) eps n/(C T)}.

    Returns (eta*, active_branch); the second branch is the one linear in eps.
    """
    root = math.sqrt(inputs.f0 / (inputs.d * inputs.L))
    batch_branch = (
        root / (inputs.sigma_gamma * math.sqrt(inputs.T))
        if inputs.sigma_gamma > 0
        else math.inf
    )
    privacy_branch = root * inputs.epsilon * inputs.n / (inputs.C * inputs.T)
    if privacy_branch <= batch_branch:
        return privacy_branch, "privacy"
    return batch_branch, "batch-noise"


def optimal_lr_sign(inputs: BoundInputs) -> float:
    """eta* = sqrt(f0 / (d L T)); independent of eps."""
    return math.sqrt(inputs.f0 / (inputs.d * inputs.L * inputs.T))


def phase2_asymptote_pair(inputs: BoundInputs):
    """Phase-2 asymptotes on the common comparison normalization.

    A_sgd  = (T eta d L / mu) (eps^2 sigma_gamma^2/(T B) + C^2 Phi^2/B^2) / eps^2
    A_sign = (sqrt(T) eta d L / mu) sqrt(eps^2 sigma_gamma^2/(T B) + C^2 Phi^2/B^2) / eps

    These are the expressions whose equality defines eps*.
    """
    if not (inputs.epsilon and math.isfinite(inputs.epsilon)):
        raise ValueError("asymptote comparison needs a finite positive epsilon")
    pref = inputs.eta * inputs.d * inputs.L / inputs.mu
    st = (inputs.epsilon * inputs.sigma_gamma) ** 2 / (inputs.T * inputs.B) + (
        inputs.C * inputs.phi / inputs.B
    ) ** 2
    a_sgd = pref * inputs.T * st / inputs.epsilon**2
    a_sign = pref * math.sqrt(inputs.T) * math.sqrt(st) / inputs.epsilon
    return a_sgd, a_sign


@dataclass(frozen=True)
class UtilityComparison:
    kind: str  # "sign_always" or "threshold"
    epsilon_star: float

    @property
    def sign_always(self) -> bool:
        return self.kind == "sign_always"


def compare_utility(inputs: BoundInputs) -> UtilityComparison:
    """Which optimizer wins the Phase-2 privacy-utility comparison.

    sigma_gamma^2 >= B: the sign-based method dominates at every budget.
    Otherwise DP-SignSGD wins exactly for eps below the crossing eps*.
    """
    star = epsilon_star(
        inputs.C, inputs.T, inputs.B, inputs.n, inputs.sigma_gamma, inputs.delta
    )
    if math.isinf(star):
        return UtilityComparison("sign_always", star)
    return UtilityComparison("threshold", star)

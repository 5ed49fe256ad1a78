"""Weak-approximation SDE models of the DP optimizers, plus Euler-Maruyama.

Each model carries a drift field b(x) and a matrix-free square-root diffusion
action xi -> sqrt(Sigma(x)) xi; the integrator advances

    x_{j+1} = x_j + b(x_j) dt + sqrt(eta) * sqrt(Sigma(x_j)) xi_j * sqrt(dt),

with the learning rate entering through the sqrt(eta) diffusion scale.

Model inventory (per optimizer and clipping phase):

* DP-SGD Phase 2 (nothing clipped): b = -grad f,
  Sigma = (sigma_gamma^2/B + C^2 sigma_dp^2/B^2) I.
* DP-SGD Phase 1 (everything clipped): b = -(C K(nu)/(sigma_gamma sqrt(d))) grad f,
  Sigma = (C^2/B)(E[Y Y^T] - K(nu)^2/(sigma_gamma^2 d) grad grad^T)
          + (C^2 sigma_dp^2/B^2) I  with Y the normalized per-example gradient.
  E[Y Y^T] has no closed form; its diagonal is estimated by a plug-in
  Monte-Carlo average over S fresh per-example draws at every evaluation, and
  the rank-one subtraction is applied through an analytic square root of
  D - rho v v^T (one-dimensional correction, clamped at zero if the
  subtraction would turn the matrix indefinite).
* DP-SignSGD Phase 2: b = -erf(grad f / sqrt(2 s^2)) with
  s^2 = C^2 sigma_dp^2/B^2 + sigma_gamma^2/B (or its linearization
  -(sqrt(2/pi)/s) grad f), Sigma = I - erf(.)^2, diagonal.
* DP-SignSGD Phase 1: b = -sqrt(2/(d pi)) (B K(nu)/(sigma_dp sigma_gamma)) grad f,
  diagonal diffusion 1 - m_i^2 with m the drift magnitude clamped to [-1, 1].
* Mixed phase: convex combination of the two phase models, with the clip
  fraction p supplied either as a constant or as a function of time (e.g. the
  empirically measured fraction from a paired discrete run).

``saturate=True`` (used by the validation harness) replaces the small-signal
Phase-1 drifts by their bounded forms: the SGD drift norm is capped at C (a
mean of C-clipped vectors cannot exceed C) and the sign drift by the erf
profile with the same slope at zero.  The default forms follow the
small-signal expressions verbatim.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .noise import NoiseSpec, k_of_nu, sample_per_example_noise
from .optimizers import DIVERGENCE_THRESHOLD, EnsembleRecord
from .privacy import PrivacyParams

__all__ = [
    "SdeModel",
    "build_sgd_phase2",
    "build_sgd_phase1",
    "build_sign_phase2",
    "build_sign_phase1",
    "build_mixed_drift",
    "euler_maruyama",
    "integrate_ensemble",
]

logger = logging.getLogger(__name__)

SGD_P1 = "SgdP1"
SGD_P2 = "SgdP2"
SIGN_P1 = "SignP1"
SIGN_P2_EXACT = "SignP2exact"
SIGN_P2_LINEAR = "SignP2linear"
SGD_MIXED = "SgdMixed"
SIGN_MIXED = "SignMixed"


@dataclass
class SdeModel:
    """Drift and matrix-free diffusion of one optimizer/phase pair.

    ``drift(x, t)`` and ``diffusion_apply(x, xi, t, rng)`` broadcast over
    leading axes of x; ``diffusion_diag(x, t)`` exposes the diagonal of
    Sigma(x) where it is available in closed form (None otherwise).
    """

    label: str
    eta: float
    drift: callable = field(repr=False)
    diffusion_apply: callable = field(repr=False)
    diffusion_diag: callable | None = field(default=None, repr=False)


def _total_phase2_variance(noise: NoiseSpec, privacy: PrivacyParams) -> float:
    B = privacy.batch_size
    return noise.sigma_gamma**2 / B + (
        privacy.clip_threshold * privacy.sigma_dp / B
    ) ** 2


def build_sgd_phase2(objective, noise: NoiseSpec, privacy: PrivacyParams, eta: float) -> SdeModel:
    """dX = -grad f dt + sqrt(eta) s dW, s^2 = sigma_gamma^2/B + C^2 sigma_dp^2/B^2."""
    s = math.sqrt(_total_phase2_variance(noise, privacy))

    def drift(x, t=0.0):
        return -objective.gradient(x)

    def diffusion_apply(x, xi, t=0.0, rng=None):
        return s * xi

    def diffusion_diag(x, t=0.0):
        return np.full_like(np.asarray(x, dtype=float), s * s)

    return SdeModel(SGD_P2, eta, drift, diffusion_apply, diffusion_diag)


def _sqrt_diag_minus_rank_one(ddiag, rho, v, xi, warned: list | None = None):
    """Apply sqrt(D - rho v v^T) to xi for diagonal D, via a rank-one correction.

    With w = D^(-1/2) v the square root is D^(1/2) (I - c w_hat w_hat^T),
    c = 1 - sqrt(1 - rho ||w||^2).  rho ||w||^2 > 1 would make the matrix
    indefinite; the correction is then clamped at c = 1 (that direction's
    variance floors at zero) and a warning is logged once per model.
    """
    sqrt_d = np.sqrt(ddiag)
    w = v / sqrt_d
    wnorm2 = np.sum(w * w, axis=-1, keepdims=True)
    arg = 1.0 - rho * wnorm2
    if np.any(arg < 0) and (warned is None or not warned):
        logger.warning(
            "phase-1 diffusion rank-one subtraction clamped (min 1 - rho||w||^2 = %.3g)",
            float(arg.min()),
        )
        if warned is not None:
            warned.append(True)
    c = 1.0 - np.sqrt(np.clip(arg, 0.0, None))
    safe = np.where(wnorm2 == 0, 1.0, wnorm2)
    coef = np.sum(w * xi, axis=-1, keepdims=True) / safe
    return sqrt_d * (xi - c * coef * w)


def build_sgd_phase1(
    objective,
    noise: NoiseSpec,
    privacy: PrivacyParams,
    eta: float,
    plugin_samples: int = 64,
    diag_only: bool = False,
    saturate: bool = False,
) -> SdeModel:
    """Fully-clipped DP-SGD model; needs sigma_gamma > 0."""
    if noise.sigma_gamma <= 0:
        raise ValueError("phase-1 model requires sigma_gamma > 0")
    d = objective.dim
    C = privacy.clip_threshold
    B = privacy.batch_size
    kv = k_of_nu(noise.nu)
    a1 = C * kv / (noise.sigma_gamma * math.sqrt(d))
    rho = C**2 * kv**2 / (B * noise.sigma_gamma**2 * d)
    dp_var = (C * privacy.sigma_dp / B) ** 2

    def drift(x, t=0.0):
        g = objective.gradient(x)
        if not saturate:
            return -a1 * g
        gnorm = np.linalg.norm(g, axis=-1, keepdims=True)
        scale = np.where(a1 * gnorm > C, C / np.where(gnorm == 0, 1.0, gnorm), a1)
        return -scale * g

    def _plugin_diag(x, rng):
        # fresh per-example draws; unbiased for diag E[Y Y^T] as S grows
        g = objective.gradient(x)
        z = sample_per_example_noise(noise, d, rng, size=g.shape[:-1] + (plugin_samples,))
        y = g[..., None, :] + z
        y = y / np.linalg.norm(y, axis=-1, keepdims=True)
        return np.mean(y * y, axis=-2)

    warned: list = []

    def diffusion_apply(x, xi, t=0.0, rng=None):
        if rng is None:
            raise ValueError("phase-1 SGD diffusion needs an rng for the plug-in estimate")
        ddiag = (C**2 / B) * _plugin_diag(x, rng) + dp_var
        if diag_only:
            g = objective.gradient(x)
            diag = np.clip(ddiag - rho * g * g, 0.0, None)
            return np.sqrt(diag) * xi
        return _sqrt_diag_minus_rank_one(ddiag, rho, objective.gradient(x), xi, warned)

    return SdeModel(SGD_P1, eta, drift, diffusion_apply, None)


def build_sign_phase2(
    objective, noise: NoiseSpec, privacy: PrivacyParams, eta: float, exact: bool = True
) -> SdeModel:
    """Unclipped DP-SignSGD model, erf drift or its linearization."""
    s2 = _total_phase2_variance(noise, privacy)
    if s2 <= 0:
        raise ValueError("sign phase-2 model requires positive total noise")
    s = math.sqrt(s2)

    def mean_sign(x):
        return erf(objective.gradient(x) / (math.sqrt(2.0) * s))

    def drift(x, t=0.0):
        if exact:
            return -mean_sign(x)
        return -math.sqrt(2.0 / math.pi) / s * objective.gradient(x)

    def diffusion_diag(x, t=0.0):
        m = mean_sign(x)
        return 1.0 - m * m

    def diffusion_apply(x, xi, t=0.0, rng=None):
        return np.sqrt(diffusion_diag(x)) * xi

    label = SIGN_P2_EXACT if exact else SIGN_P2_LINEAR
    return SdeModel(label, eta, drift, diffusion_apply, diffusion_diag)


def build_sign_phase1(
    objective,
    noise: NoiseSpec,
    privacy: PrivacyParams,
    eta: float,
    saturate: bool = False,
) -> SdeModel:
    """Fully-clipped DP-SignSGD model with diagonal diffusion 1 - m_i^2."""
    if noise.sigma_gamma <= 0 or privacy.sigma_dp <= 0:
        raise ValueError("sign phase-1 model requires sigma_gamma > 0 and sigma_dp > 0")
    d = objective.dim
    a1 = (
        math.sqrt(2.0 / (d * math.pi))
        * privacy.batch_size
        * k_of_nu(noise.nu)
        / (privacy.sigma_dp * noise.sigma_gamma)
    )

    def mean_sign(x):
        # clamped drift magnitude; also the saturated drift profile
        z = a1 * objective.gradient(x)
        if saturate:
            return erf(0.5 * math.sqrt(math.pi) * z)
        return np.clip(z, -1.0, 1.0)

    def drift(x, t=0.0):
        if saturate:
            return -mean_sign(x)
        return -a1 * objective.gradient(x)

    def diffusion_diag(x, t=0.0):
        m = mean_sign(x)
        return 1.0 - m * m

    def diffusion_apply(x, xi, t=0.0, rng=None):
        return np.sqrt(diffusion_diag(x)) * xi

    return SdeModel(SIGN_P1, eta, drift, diffusion_apply, diffusion_diag)


def build_mixed_drift(
    objective,
    noise: NoiseSpec,
    privacy: PrivacyParams,
    eta: float,
    p,
    method: str = "dpsgd",
    exact: bool = True,
    plugin_samples: int = 64,
    saturate: bool = False,
) -> SdeModel:
    """Mixture of the phase models with clip fraction p in [0, 1].

    p may be a constant or a callable t -> fraction (measured schedule).
    Drift is the convex combination p b_1 + (1-p) b_2 and the diffusion
    covariance the convex combination p Sigma_1 + (1-p) Sigma_2, so the
    endpoints p = 0 / p = 1 reproduce the pure-phase models exactly.
    """
    p_of_t = p if callable(p) else (lambda t, _p=float(p): _p)

    def check(pv):
        if not 0.0 <= pv <= 1.0:
            raise ValueError(f"clip fraction must lie in [0, 1], got {pv}")
        return pv

    if method == "dpsgd":
        m1 = build_sgd_phase1(
            objective, noise, privacy, eta, plugin_samples=plugin_samples, saturate=saturate
        )
        m2 = build_sgd_phase2(objective, noise, privacy, eta)
        label = SGD_MIXED
    elif method == "dpsignsgd":
        m1 = build_sign_phase1(objective, noise, privacy, eta, saturate=saturate)
        m2 = build_sign_phase2(objective, noise, privacy, eta, exact=exact)
        label = SIGN_MIXED
    else:
        raise ValueError(f"mixed model undefined for method {method!r}")

    def drift(x, t=0.0):
        pv = check(p_of_t(t))
        if pv == 0.0:
            return m2.drift(x, t)
        if pv == 1.0:
            return m1.drift(x, t)
        return pv * m1.drift(x, t) + (1.0 - pv) * m2.drift(x, t)

    def diffusion_apply(x, xi, t=0.0, rng=None):
        # variances add across the independent phase components
        pv = check(p_of_t(t))
        if pv == 0.0:
            return m2.diffusion_apply(x, xi, t, rng)
        if pv == 1.0:
            return m1.diffusion_apply(x, xi, t, rng)
        if rng is None:
            raise ValueError("mixed diffusion needs an rng to split phase noise")
        xi2 = rng.standard_normal(np.asarray(xi).shape)
        return math.sqrt(pv) * m1.diffusion_apply(x, xi, t, rng) + math.sqrt(
            1.0 - pv
        ) * m2.diffusion_apply(x, xi2, t, rng)

    diffusion_diag = None
    if m1.diffusion_diag is not None and m2.diffusion_diag is not None:

        def diffusion_diag(x, t=0.0):
            pv = check(p_of_t(t))
            return pv * m1.diffusion_diag(x, t) + (1.0 - pv) * m2.diffusion_diag(x, t)

    return SdeModel(label, eta, drift, diffusion_apply, diffusion_diag)


def integrate_ensemble(
    model: SdeModel,
    objective,
    x0: np.ndarray,
    dt: float,
    steps: int,
    n_paths: int,
    seed: int,
    record_every: int = 1,
    observables: dict | None = None,
) -> EnsembleRecord:
    """Euler-Maruyama over an ensemble; deterministic per seed.

    Non-finite or > DIVERGENCE_THRESHOLD losses freeze the path and set its
    diverged flag, mirroring the discrete runner.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x0 = np.asarray(x0, dtype=float)
    d = x0.shape[-1]
    if x0.ndim == 1:
        x = np.broadcast_to(x0, (n_paths, d)).copy()
    else:
        if x0.shape != (n_paths, d):
            raise ValueError(f"x0 must have shape ({n_paths}, {d})")
        x = x0.copy()

    rec_steps = np.arange(0, steps + 1, record_every)
    if rec_steps[-1] != steps:
        rec_steps = np.append(rec_steps, steps)
    rec_set = set(int(s) for s in rec_steps)
    n_rec = len(rec_steps)
    losses = np.empty((n_rec, n_paths))
    gnorms = np.empty((n_rec, n_paths))
    obs_out = {name: [] for name in (observables or {})}

    diverged = np.zeros(n_paths, dtype=bool)
    diverged_at = np.full(n_paths, -1, dtype=int)
    root_eta_dt = math.sqrt(model.eta) * math.sqrt(dt)

    def record(ri, xs):
        losses[ri] = objective.value(xs)
        g = objective.gradient(xs)
        gnorms[ri] = np.sum(g * g, axis=-1)
        for name, fn in (observables or {}).items():
            obs_out[name].append(np.asarray(fn(xs)))

    ri = 0
    record(ri, x)
    ri += 1
    for j in range(steps):
        t = j * dt
        xi = rng.standard_normal(x.shape)
        x_new = (
            x
            + model.drift(x, t) * dt
            + root_eta_dt * model.diffusion_apply(x, xi, t, rng)
        )
        f_new = objective.value(x_new)
        bad = ~np.isfinite(f_new) | (np.abs(f_new) > DIVERGENCE_THRESHOLD)
        newly = bad & ~diverged
        diverged_at[newly] = j + 1
        diverged |= bad
        x = np.where((~bad)[:, None], x_new, x)
        if (j + 1) in rec_set:
            record(ri, x)
            ri += 1

    obs_final = {name: np.stack(vals) for name, vals in obs_out.items()}
    return EnsembleRecord(
        steps=rec_steps,
        losses=losses,
        grad_norms_sq=gnorms,
        diverged=diverged,
        diverged_at=diverged_at,
        clip_fraction=None,
        observables=obs_final,
        seed=seed,
    )


def euler_maruyama(
    model: SdeModel,
    objective,
    x0: np.ndarray,
    dt: float,
    steps: int,
    seed: int,
    record_every: int = 1,
):
    """Single-path integration; returns the ensemble record with one path."""
    return integrate_ensemble(
        model,
        objective,
        np.asarray(x0, dtype=float)[None, :],
        dt,
        steps,
        n_paths=1,
        seed=seed,
        record_every=record_every,
    )

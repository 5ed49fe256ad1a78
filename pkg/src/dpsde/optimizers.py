"""Discrete-time DP-SGD, DP-SignSGD and DP-Adam with per-example clipping.

Every private gradient follows the same pipeline: draw a mini-batch, clip
each per-example gradient to l2 norm C, average, then add Gaussian noise
N(0, C^2 sigma_dp^2 / B^2 I_d).  Per-example gradients come from a
:class:`GradientOracle`: dataset-backed for logistic objectives, synthetic
(full gradient + injected noise) for quadratic/quartic testbeds.

``run_optimizer`` evolves one trajectory; ``run_ensemble`` evolves many in
lockstep as one (paths, d) array, which is what the experiment harness uses.
Runs terminate early per path when the loss exceeds DIVERGENCE_THRESHOLD or
turns non-finite, flagging the path as diverged but keeping the partial
record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .noise import NoiseSpec, sample_batch_noise, sample_per_example_noise
from .objectives import LogisticObjective
from .privacy import PrivacyParams, clip

__all__ = [
    "DPSGD",
    "DPSIGNSGD",
    "DPADAM",
    "METHODS",
    "DIVERGENCE_THRESHOLD",
    "OptimizerConfig",
    "OptimizerState",
    "GradientOracle",
    "DatasetOracle",
    "SyntheticOracle",
    "sample_batch_indices",
    "private_gradient",
    "step_dpsgd",
    "step_dpsignsgd",
    "step_dpadam",
    "RunRecord",
    "EnsembleRecord",
    "run_optimizer",
    "run_ensemble",
    "save_run_record",
]

DPSGD = "dpsgd"
DPSIGNSGD = "dpsignsgd"
DPADAM = "dpadam"
METHODS = (DPSGD, DPSIGNSGD, DPADAM)

DIVERGENCE_THRESHOLD = 1e12


@dataclass(frozen=True)
class OptimizerConfig:
    method: str
    eta: float
    privacy: PrivacyParams
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str | None = None  # None (constant) or "decay06"
    sampling: str = "poisson"  # "poisson" (with replacement) or "shuffle"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")
        if self.schedule not in (None, "decay06"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.sampling not in ("poisson", "shuffle"):
            raise ValueError(f"unknown sampling {self.sampling!r}")

    def eta_at(self, k: int) -> float:
        if self.schedule == "decay06":
            return self.eta * (1.0 + self.eta * k) ** -0.6
        return self.eta


@dataclass
class OptimizerState:
    x: np.ndarray
    step: int = 0
    m: np.ndarray | None = None  # DP-Adam first moment
    v: np.ndarray | None = None  # DP-Adam second moment

    @staticmethod
    def initial(x0: np.ndarray, method: str) -> "OptimizerState":
        x0 = np.asarray(x0, dtype=float)
        if method == DPADAM:
            return OptimizerState(x0.copy(), 0, np.zeros_like(x0), np.zeros_like(x0))
        return OptimizerState(x0.copy(), 0)


class GradientOracle:
    """Per-example gradient access for one objective."""

    per_example_mode = True

    def __init__(self, objective):
        self.objective = objective

    def per_example(self, x, indices, rng):
        raise NotImplementedError


class DatasetOracle(GradientOracle):
    """Exact per-example gradients of a logistic dataset."""

    def __init__(self, objective: LogisticObjective):
        if not isinstance(objective, LogisticObjective):
            raise TypeError("DatasetOracle requires a LogisticObjective")
        super().__init__(objective)

    @property
    def n(self) -> int:
        return self.objective.n

    def per_example(self, x, indices, rng):
        return self.objective.per_example_gradients(x)[..., indices, :]


class SyntheticOracle(GradientOracle):
    """Full gradient plus injected noise, the synthetic experimental protocol.

    mode "per-example" draws one Student-t/Gaussian noise vector per sampled
    example and clips each; mode "batch" draws the batch-averaged Gaussian
    noise directly and clips the mean.  The two coincide in distribution
    whenever clipping is inactive.
    """

    def __init__(self, objective, noise: NoiseSpec, mode: str = "per-example"):
        if mode not in ("per-example", "batch"):
            raise ValueError(f"unknown synthetic mode {mode!r}")
        super().__init__(objective)
        self.noise = noise
        self.mode = mode
        self.per_example_mode = mode == "per-example"

    def per_example(self, x, indices, rng):
        g = self.objective.gradient(x)
        batch = len(indices)
        z = sample_per_example_noise(
            self.noise, self.objective.dim, rng, size=g.shape[:-1] + (batch,)
        )
        return g[..., None, :] + z

    def batch_mean(self, x, rng):
        g = self.objective.gradient(x)
        z = sample_batch_noise(self.noise, self.objective.dim, rng, size=g.shape[:-1])
        return g + z


def sample_batch_indices(
    config: OptimizerConfig, n: int, step: int, rng, cache: dict | None = None
) -> np.ndarray:
    """Mini-batch index draw: i.i.d. uniform ("poisson") or epoch shuffling.

    Shuffle mode draws one permutation per epoch and walks it in B-sized
    chunks; the caller owns ``cache`` so runs never share state.
    """
    B = config.privacy.batch_size
    if config.sampling == "poisson":
        return rng.integers(0, n, size=B)
    if cache is None:
        cache = {}
    per_epoch = max(n // B, 1)
    epoch, pos = divmod(step, per_epoch)
    if cache.get("epoch") != epoch:
        cache["epoch"] = epoch
        cache["perm"] = rng.permutation(n)
    return cache["perm"][pos * B : pos * B + B]


def private_gradient(
    oracle: GradientOracle,
    x: np.ndarray,
    batch_indices,
    privacy: PrivacyParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """g = (1/B) sum_i clip(grad_i, C) + N(0, C^2 sigma_dp^2 / B^2 I_d)."""
    g, _ = _private_gradient_with_fraction(oracle, x, batch_indices, privacy, rng)
    return g


def _private_gradient_with_fraction(oracle, x, batch_indices, privacy, rng):
    C = privacy.clip_threshold
    B = privacy.batch_size
    if getattr(oracle, "per_example_mode", True):
        if batch_indices is None or len(batch_indices) == 0:
            raise ValueError("empty batch")
        grads = oracle.per_example(x, batch_indices, rng)
        norms = np.linalg.norm(grads, axis=-1)
        clipped = clip(grads, C)
        mean = clipped.mean(axis=-2)
        frac = float(np.mean(norms >= C))
    else:
        gm = oracle.batch_mean(x, rng)
        norms = np.linalg.norm(gm, axis=-1)
        mean = clip(gm, C)
        frac = float(np.mean(norms >= C))
    noise = (C * privacy.sigma_dp / B) * rng.standard_normal(mean.shape)
    return mean + noise, frac


def step_dpsgd(state: OptimizerState, g: np.ndarray, eta: float) -> OptimizerState:
    """x' = x - eta g."""
    return OptimizerState(state.x - eta * g, state.step + 1, state.m, state.v)


def step_dpsignsgd(state: OptimizerState, g: np.ndarray, eta: float) -> OptimizerState:
    """x' = x - eta sign(g), component-wise; sign(0) = 0."""
    return OptimizerState(state.x - eta * np.sign(g), state.step + 1, state.m, state.v)


def step_dpadam(
    state: OptimizerState, g: np.ndarray, config: OptimizerConfig
) -> OptimizerState:
    """Bias-corrected Adam on the privatized gradient."""
    if state.m is None or state.v is None:
        raise ValueError("DP-Adam state must carry m and v (use OptimizerState.initial)")
    k = state.step
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1 ** (k + 1))
    v_hat = v / (1.0 - config.beta2 ** (k + 1))
    x = state.x - config.eta_at(k) * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return OptimizerState(x, k + 1, m, v)


@dataclass
class RunRecord:
    """One trajectory: loss / squared gradient-norm series plus metadata."""

    steps: np.ndarray
    losses: np.ndarray
    grad_norms_sq: np.ndarray
    diverged: bool
    diverged_at: int | None
    seed: int
    config: dict
    x_final: np.ndarray | None = None
    x_snapshots: np.ndarray | None = None


@dataclass
class EnsembleRecord:
    """Lockstep ensemble: per-record, per-path losses and summary masks."""

    steps: np.ndarray  # recorded step indices, shape (n_rec,)
    losses: np.ndarray  # shape (n_rec, paths)
    grad_norms_sq: np.ndarray  # shape (n_rec, paths)
    diverged: np.ndarray  # bool, shape (paths,)
    diverged_at: np.ndarray  # int, -1 if finite, shape (paths,)
    clip_fraction: np.ndarray | None  # per-step mean over paths/examples
    observables: dict  # name -> (n_rec, paths, ...) arrays
    seed: int

    @property
    def mean_loss(self) -> np.ndarray:
        return self.losses.mean(axis=1)


def _record_steps(T: int, record_every: int) -> np.ndarray:
    steps = np.arange(0, T + 1, record_every)
    if steps[-1] != T:
        steps = np.append(steps, T)
    return steps


def run_ensemble(
    objective,
    oracle: GradientOracle,
    config: OptimizerConfig,
    x0: np.ndarray,
    T: int,
    n_paths: int,
    seed: int,
    record_every: int = 1,
    observables: dict | None = None,
    record_clip_fraction: bool = False,
) -> EnsembleRecord:
    """Evolve ``n_paths`` independent trajectories in lockstep.

    x0 is either a single d-vector (shared start) or a (paths, d) array.
    Deterministic given (x0, seed); paths whose loss leaves the finite range
    freeze in place and are flagged.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x0 = np.asarray(x0, dtype=float)
    d = objective.dim
    if x0.ndim == 1:
        x = np.broadcast_to(x0, (n_paths, d)).copy()
    else:
        if x0.shape != (n_paths, d):
            raise ValueError(f"x0 must have shape ({n_paths}, {d})")
        x = x0.copy()

    is_adam = config.method == DPADAM
    m = np.zeros_like(x) if is_adam else None
    v = np.zeros_like(x) if is_adam else None

    rec_steps = _record_steps(T, record_every)
    rec_set = set(int(s) for s in rec_steps)
    n_rec = len(rec_steps)
    losses = np.empty((n_rec, n_paths))
    gnorms = np.empty((n_rec, n_paths))
    obs_out = {name: [] for name in (observables or {})}
    clip_frac = np.zeros(T) if record_clip_fraction else None

    diverged = np.zeros(n_paths, dtype=bool)
    diverged_at = np.full(n_paths, -1, dtype=int)

    dataset_n = oracle.n if isinstance(oracle, DatasetOracle) else None

    def record(ri, xs):
        losses[ri] = objective.value(xs)
        g = objective.gradient(xs)
        gnorms[ri] = np.sum(g * g, axis=-1)
        for name, fn in (observables or {}).items():
            obs_out[name].append(np.asarray(fn(xs)))

    ri = 0
    record(ri, x)
    ri += 1
    shuffle_cache: dict = {}
    for k in range(T):
        if dataset_n is not None:
            indices = sample_batch_indices(config, dataset_n, k, rng, shuffle_cache)
        else:
            indices = np.arange(config.privacy.batch_size)
        g, frac = _private_gradient_with_fraction(
            oracle, x, indices, config.privacy, rng
        )
        if record_clip_fraction:
            clip_frac[k] = frac
        eta = config.eta_at(k)
        if config.method == DPSGD:
            x_new = x - eta * g
        elif config.method == DPSIGNSGD:
            x_new = x - eta * np.sign(g)
        else:
            m_new = config.beta1 * m + (1.0 - config.beta1) * g
            v_new = config.beta2 * v + (1.0 - config.beta2) * g * g
            m_hat = m_new / (1.0 - config.beta1 ** (k + 1))
            v_hat = v_new / (1.0 - config.beta2 ** (k + 1))
            x_new = x - eta * m_hat / (np.sqrt(v_hat) + config.adam_eps)

        f_new = objective.value(x_new)
        bad = ~np.isfinite(f_new) | (np.abs(f_new) > DIVERGENCE_THRESHOLD)
        newly = bad & ~diverged
        diverged_at[newly] = k + 1
        diverged |= bad
        keep = (~bad)[:, None]
        x = np.where(keep, x_new, x)
        if is_adam:
            m = np.where(keep, m_new, m)
            v = np.where(keep, v_new, v)
        if (k + 1) in rec_set:
            record(ri, x)
            ri += 1

    obs_final = {name: np.stack(vals) for name, vals in obs_out.items()}
    return EnsembleRecord(
        steps=rec_steps,
        losses=losses,
        grad_norms_sq=gnorms,
        diverged=diverged,
        diverged_at=diverged_at,
        clip_fraction=clip_frac,
        observables=obs_final,
        seed=seed,
    )


def run_optimizer(
    objective,
    oracle: GradientOracle,
    config: OptimizerConfig,
    x0: np.ndarray,
    T: int,
    seed: int,
    record_every: int = 1,
    snapshot_every: int | None = None,
) -> RunRecord:
    """One trajectory; fully deterministic given the seed.

    With ``snapshot_every`` set, x snapshots land on the record grid.
    """
    snap_obs = {}
    if snapshot_every is not None:
        snap_obs["x"] = lambda xs: xs.copy()
    rec = run_ensemble(
        objective,
        oracle,
        config,
        np.asarray(x0, dtype=float)[None, :],
        T,
        n_paths=1,
        seed=seed,
        record_every=record_every,
        observables=snap_obs or None,
    )
    diverged = bool(rec.diverged[0])
    return RunRecord(
        steps=rec.steps,
        losses=rec.losses[:, 0],
        grad_norms_sq=rec.grad_norms_sq[:, 0],
        diverged=diverged,
        diverged_at=int(rec.diverged_at[0]) if diverged else None,
        seed=seed,
        config=_config_dict(config),
        x_snapshots=rec.observables.get("x", None),
    )


def _config_dict(config: OptimizerConfig) -> dict:
    p = config.privacy
    return {
        "method": config.method,
        "eta": config.eta,
        "schedule": config.schedule,
        "sampling": config.sampling,
        "beta1": config.beta1,
        "beta2": config.beta2,
        "adam_eps": config.adam_eps,
        "privacy": {
            "epsilon": p.epsilon,
            "delta": p.delta,
            "n": p.n,
            "batch_size": p.batch_size,
            "steps": p.steps,
            "clip": p.clip_threshold,
            "sigma_dp": p.sigma_dp,
            "q": p.q,
            "phi": p.phi,
        },
    }


def save_run_record(record: RunRecord, csv_path) -> None:
    """CSV `step,loss,grad_norm_sq,diverged` plus a JSON config sidecar."""
    import csv as _csv

    with open(csv_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["step", "loss", "grad_norm_sq", "diverged"])
        for s, f, g in zip(record.steps, record.losses, record.grad_norms_sq):
            flagged = record.diverged and record.diverged_at is not None and s >= record.diverged_at
            writer.writerow([int(s), repr(float(f)), repr(float(g)), int(flagged)])
    sidecar = str(csv_path) + ".json"
    with open(sidecar, "w") as fh:
        json.dump({"seed": record.seed, "diverged": record.diverged, "config": record.config}, fh, indent=2)

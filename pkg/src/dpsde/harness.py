"""Monte-Carlo experiment harness.

Six experiments, each reproducing one of the paper-style desk figures:

* ``sde_validation``  — paired discrete/SDE ensembles, discrepancy report
* ``scaling``         — Protocol-A final-loss vs privacy budget, power-law fits
* ``speed``           — time-to-half-initial-loss across budgets, divergence
* ``epsstar``         — loss-curve crossing vs the closed-form threshold
* ``protocol_b``      — per-budget (eta, C) grid search, best-lr scaling
* ``stationary``      — ensemble moments vs closed-form stationary curves

Every experiment expands into a deterministic list of cells; each cell is
seeded by SeedSequence(master_seed, cell_index) so results are byte-identical
for any worker count.  Results are emitted in one long-format CSV
(experiment, method, epsilon, eta, clip, batch, reps, metric, value, stderr,
diverged, step, series) next to a manifest echoing the resolved config.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import theory
from .noise import NoiseSpec
from .objectives import Quadratic, Quartic
from .optimizers import (
    DPSGD,
    DPSIGNSGD,
    OptimizerConfig,
    SyntheticOracle,
    run_ensemble,
)
from .privacy import PrivacyParams, epsilon_from_sigma_analytic, epsilon_star
from .sde import build_mixed_drift, integrate_ensemble

__all__ = [
    "EXPERIMENTS",
    "default_config",
    "expand_cells",
    "run_experiment",
    "write_results_csv",
    "write_manifest",
    "fit_power_law",
    "FitResult",
    "detect_crossing",
    "CrossingReport",
    "estimate_moments",
    "streaming_moments",
]

CSV_COLUMNS = [
    "experiment",
    "method",
    "epsilon",
    "eta",
    "clip",
    "batch",
    "reps",
    "metric",
    "value",
    "stderr",
    "diverged",
    "step",
    "series",
]


# ---------------------------------------------------------------------------
# statistics helpers


def estimate_moments(values: np.ndarray, axis: int = 0):
    """Unbiased mean/variance with standard errors along ``axis``.

    Returns (mean, var, se_mean, se_var); needs >= 2 samples.  The variance
    standard error uses the Gaussian approximation var * sqrt(2/(R-1)).
    """
    values = np.asarray(values, dtype=float)
    r = values.shape[axis]
    if r < 2:
        raise ValueError("need at least 2 samples")
    mean = values.mean(axis=axis)
    var = values.var(axis=axis, ddof=1)
    se_mean = np.sqrt(var / r)
    se_var = var * math.sqrt(2.0 / (r - 1))
    return mean, var, se_mean, se_var


def streaming_moments(values) -> tuple[float, float]:
    """One-pass Welford mean/variance; cross-checks estimate_moments."""
    count, mean, m2 = 0, 0.0, 0.0
    for v in values:
        count += 1
        delta = v - mean
        mean += delta / count
        m2 += delta * (v - mean)
    if count < 2:
        raise ValueError("need at least 2 samples")
    return mean, m2 / (count - 1)


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r2: float
    n_used: int
    n_dropped: int


def fit_power_law(eps, y, baseline: float | None = None) -> FitResult:
    """Least squares on (log eps, log(y - baseline)).

    Non-positive excess points are dropped with a stderr note; fewer than 3
    surviving points is an error.
    """
    eps = np.asarray(eps, dtype=float)
    y = np.asarray(y, dtype=float)
    excess = y - (baseline if baseline is not None else 0.0)
    keep = np.isfinite(excess) & (excess > 0) & np.isfinite(eps) & (eps > 0)
    dropped = int(np.size(excess) - keep.sum())
    if dropped:
        print(f"fit_power_law: dropped {dropped} non-positive point(s)", file=sys.stderr)
    if keep.sum() < 3:
        raise ValueError("fit_power_law needs at least 3 positive points")
    lx, ly = np.log(eps[keep]), np.log(excess[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return FitResult(float(slope), float(intercept), r2, int(keep.sum()), dropped)


@dataclass(frozen=True)
class CrossingReport:
    crossings: tuple
    significant: tuple
    monotone: bool

    @property
    def crossing(self):
        return self.crossings[0] if self.crossings else None


def detect_crossing(eps, loss_a, loss_b, se_a=None, se_b=None) -> CrossingReport:
    """Interpolated sign changes of (loss_a - loss_b) over a shared eps grid.

    Interpolation is linear in log(eps).  With standard errors available,
    each crossing is marked significant when both bracketing differences
    exceed twice their combined standard error.
    """
    eps = np.asarray(eps, dtype=float)
    if eps.size < 2:
        raise ValueError("need at least 2 grid points")
    if np.any(np.diff(eps) <= 0):
        raise ValueError("eps grid must be strictly increasing")
    diff = np.asarray(loss_a, dtype=float) - np.asarray(loss_b, dtype=float)
    se = None
    if se_a is not None and se_b is not None:
        se = np.sqrt(np.asarray(se_a) ** 2 + np.asarray(se_b) ** 2)
    crossings, significant = [], []
    for i in range(eps.size - 1):
        d0, d1 = diff[i], diff[i + 1]
        if not (np.isfinite(d0) and np.isfinite(d1)):
            continue
        if d0 == 0.0:
            crossings.append(float(eps[i]))
            significant.append(False)
            continue
        if d0 * d1 < 0:
            w = abs(d0) / (abs(d0) + abs(d1))
            log_cross = (1 - w) * math.log(eps[i]) + w * math.log(eps[i + 1])
            crossings.append(float(math.exp(log_cross)))
            significant.append(
                bool(se is not None and abs(d0) > 2 * se[i] and abs(d1) > 2 * se[i + 1])
            )
    return CrossingReport(tuple(crossings), tuple(significant), len(crossings) <= 1)


# ---------------------------------------------------------------------------
# experiment configs


def _quadratic_from(cfg: dict) -> Quadratic:
    if "eigenvalues" in cfg:
        return Quadratic(np.asarray(cfg["eigenvalues"], dtype=float))
    d = int(cfg["d"])
    lam = float(cfg.get("lam", 1.0))
    eig = np.full(d, lam)
    eig[: len(cfg.get("lam_head", []))] = cfg.get("lam_head", [])
    return Quadratic(eig)


def _objective_from(cfg: dict):
    kind = cfg.get("objective", "quadratic")
    if kind == "quadratic":
        return _quadratic_from(cfg)
    if kind == "quartic":
        d = int(cfg["d"])
        h = np.full(d, 1.0)
        h[0] = -2.0
        return Quartic(h, float(cfg.get("quartic_lam", 0.5)), float(cfg.get("quartic_xi", 0.1)))
    raise ValueError(f"unknown objective {kind!r}")


DEFAULTS: dict[str, dict] = {
    "sde_validation": {
        "objective": "quadratic",
        "d": 64,
        "lam": 0.1,
        "lam_head": [0.2],
        "x0_scale": 50.0,
        "sigma_gamma": None,  # None -> 1/sqrt(d)
        "nu": math.inf,
        "B": 1,
        "C": 5.0,
        "sigma_dp": 0.03,
        "n": 10000,
        "delta": 1e-4,
        "T": 5000,
        "reps": 200,
        "eta": {"dpsgd": 0.1, "dpsignsgd": 0.01},
        "methods": ["dpsgd", "dpsignsgd"],
        "burn_in_fraction": 0.02,
        "plugin_samples": 64,
    },
    "scaling": {
        "d": 128,
        "lam": 10.0,
        "x0_scale": 0.35,
        "sigma_gamma": 0.01,
        "B": 64,
        "C": 5.0,
        "n": 25600,
        "delta": 1e-5,
        "T": 2000,
        "reps": 100,
        "record_every": 10,
        "eta": {"dpsgd": 0.01, "dpsignsgd": 2e-4, "dpadam": 2e-4},
        "methods": ["dpsgd", "dpsignsgd"],
        "sigma_grid": [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
        "fit_tolerance": 0.2,
    },
    "speed": {
        "d": 128,
        "lam": 10.0,
        "x0_coord": 0.01,
        "sigma_gamma": 0.01,
        "B": 1,
        "C": 5.0,
        "n": 1000,
        "delta": 1e-5,
        "T": 2000,
        "reps": 200,
        "record_every": 1,
        "curve_every": 20,
        "eta": {"dpsgd": 3.5e-4, "dpsignsgd": 5e-5},
        "methods": ["dpsgd", "dpsignsgd"],
        "sigma_grid": [0.012, 0.017, 0.024, 0.034, 0.048],
        "sigma_diverge": 2.0e6,
    },
    "epsstar": {
        "d": 16,
        "lam": 1.0,
        "x0_coord": 0.25,
        "sigma_gamma": 6.0,
        "batch_grid": [48, 64, 80],
        "C": 12.0,
        "n": 4000,
        "delta": 1e-5,
        "T": 2500,
        "reps": 600,
        "record_every": 100,
        "eta": {"dpsgd": 0.01, "dpsignsgd": 0.01},
        "methods": ["dpsgd", "dpsignsgd"],
        "eps_grid": list(np.geomspace(0.15, 1.2, 9)),
    },
    "protocol_b": {
        "d": 32,
        "lam": 1.0,
        "x0_coord": 0.25,
        "sigma_gamma": 0.05,
        "B": 16,
        "C_grid": [2.0, 4.0],
        "n": 8000,
        "delta": 1e-5,
        "T": 1000,
        "reps": 48,
        "record_every": 10,
        "methods": ["dpsgd", "dpsignsgd", "dpadam"],
        "eps_grid": list(np.geomspace(0.0032, 0.011, 6)),
        "eta_grid": list(np.geomspace(2e-4, 1e-2, 18)),
        "sgd_base_eta_min": 1.2e-3,
    },
    "stationary": {
        "eigenvalues": [2.0, 1.0],
        "x0": [0.01, 0.005],
        "eta": 0.001,
        "sigma_gamma": 0.1,
        "sigma_dp": 0.1,
        "B": 1,
        "C": 5.0,
        "n": 1000,
        "delta": 1e-5,
        "T": 4000,
        "reps": 20000,
        "checkpoints": [250, 500, 750, 1000, 1500, 2000, 3000, 4000],
        "methods": ["dpsgd", "dpsignsgd"],
    },
}

EXPERIMENTS = tuple(DEFAULTS)


def default_config(experiment: str, overrides: dict | None = None) -> dict:
    if experiment not in DEFAULTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    cfg = json.loads(json.dumps(DEFAULTS[experiment]))  # deep copy
    for key, val in (overrides or {}).items():
        if key == "eta" and isinstance(val, dict) and isinstance(cfg.get("eta"), dict):
            cfg["eta"].update(val)
        else:
            cfg[key] = val
    return cfg


def _privacy(cfg, sigma_dp, B=None, C=None) -> PrivacyParams:
    return PrivacyParams(
        delta=float(cfg["delta"]),
        n=int(cfg["n"]),
        batch_size=int(B if B is not None else cfg["B"]),
        steps=int(cfg["T"]),
        clip_threshold=float(C if C is not None else cfg["C"]),
        sigma_dp=float(sigma_dp),
    )


def save_trajectories_csv(record, path, source: str) -> None:
    """Per-path loss series in the RunRecord schema plus a source column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "path", "loss", "grad_norm_sq", "diverged", "source"])
        n_rec, n_paths = record.losses.shape
        for p in range(n_paths):
            div_at = record.diverged_at[p]
            for i in range(n_rec):
                s = int(record.steps[i])
                flagged = bool(record.diverged[p]) and div_at >= 0 and s >= div_at
                writer.writerow([
                    s, p, repr(float(record.losses[i, p])),
                    repr(float(record.grad_norms_sq[i, p])), int(flagged), source,
                ])


def _maybe_save(cfg, record, source: str, tag: str) -> None:
    save_dir = cfg.get("_trajectory_dir")
    if not save_dir:
        return
    import os

    os.makedirs(save_dir, exist_ok=True)
    save_trajectories_csv(record, os.path.join(save_dir, f"{tag}.csv"), source)


def _row(experiment, metric, value, *, method="", epsilon="", eta="", clip="",
         batch="", reps="", stderr="", diverged=0, step="", series=""):
    return {
        "experiment": experiment,
        "method": method,
        "epsilon": epsilon,
        "eta": eta,
        "clip": clip,
        "batch": batch,
        "reps": reps,
        "metric": metric,
        "value": value,
        "stderr": stderr,
        "diverged": int(diverged),
        "step": step,
        "series": series,
    }


def _cell_seed(master_seed: int, key) -> int:
    ints = [master_seed] + [int(k) for k in (key if isinstance(key, (list, tuple)) else [key])]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _seed_key(experiment: str, cfg: dict, cell: tuple, idx: int):
    """Stream key for one cell.

    protocol_b shares one stream across the eta grid (common random numbers)
    so that the per-budget argmin compares trajectories driven by identical
    noise; everything else keys by cell position.
    """
    if experiment == "protocol_b":
        method, eps, _eta, C = cell
        return [
            ("dpsgd", "dpsignsgd", "dpadam").index(method),
            cfg["eps_grid"].index(eps),
            cfg["C_grid"].index(C),
        ]
    return [idx]


def _tail_mean(losses: np.ndarray, window: int = 5):
    """Mean over the last `window` recorded values, per path, then over paths."""
    tail = losses[-window:].mean(axis=0)
    mean, _, se, _ = estimate_moments(tail)
    return float(mean), float(se)


# ---------------------------------------------------------------------------
# sde validation


def _sde_validation_cell(cfg: dict, method: str, seed: int) -> dict:
    obj = _objective_from(cfg)
    d = obj.dim
    sigma_gamma = cfg["sigma_gamma"]
    if sigma_gamma is None:
        sigma_gamma = 1.0 / math.sqrt(d)
    noise = NoiseSpec(float(sigma_gamma), float(cfg["nu"]), int(cfg["B"]))
    privacy = _privacy(cfg, cfg["sigma_dp"])
    eta = float(cfg["eta"][method])
    T, reps = int(cfg["T"]), int(cfg["reps"])

    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    x0 = cfg["x0_scale"] / math.sqrt(d) * rng.standard_normal(d)

    oracle = SyntheticOracle(obj, noise, mode="per-example")
    opt = OptimizerConfig(method=method, eta=eta, privacy=privacy)
    disc = run_ensemble(
        obj, oracle, opt, x0, T, reps, seed=seed, record_every=1,
        record_clip_fraction=True,
    )

    frac = disc.clip_fraction

    def p_of_t(t):
        k = min(int(round(t / eta)), T - 1)
        return float(frac[k])

    model = build_mixed_drift(
        obj, noise, privacy, eta, p_of_t, method=method,
        exact=True, plugin_samples=int(cfg["plugin_samples"]), saturate=True,
    )
    sde = integrate_ensemble(model, obj, x0, dt=eta, steps=T, n_paths=reps, seed=seed + 1)
    _maybe_save(cfg, disc, "discrete", f"sde_validation-{method}-discrete")
    _maybe_save(cfg, sde, "sde", f"sde_validation-{method}-sde")

    ef_d, ef_s = disc.losses.mean(axis=1), sde.losses.mean(axis=1)
    eg_d, eg_s = disc.grad_norms_sq.mean(axis=1), sde.grad_norms_sq.mean(axis=1)
    burn = int(cfg["burn_in_fraction"] * T)
    sl = slice(burn, None)
    rel_f = np.abs(ef_d[sl] - ef_s[sl]) / np.abs(ef_d[sl])
    rel_g = np.abs(eg_d[sl] - eg_s[sl]) / np.abs(eg_d[sl])

    rows = [
        _row("sde_validation", "mean_rel_discrepancy_f", float(rel_f.mean()),
             method=method, eta=eta, reps=reps),
        _row("sde_validation", "max_rel_discrepancy_f", float(rel_f.max()),
             method=method, eta=eta, reps=reps),
        _row("sde_validation", "mean_rel_discrepancy_grad", float(rel_g.mean()),
             method=method, eta=eta, reps=reps),
        _row("sde_validation", "mean_clip_fraction", float(frac.mean()),
             method=method, eta=eta, reps=reps),
    ]
    curve_every = max(1, T // 100)
    for k in range(0, T + 1, curve_every):
        rows.append(_row("sde_validation", "mean_loss", float(ef_d[k]),
                         method=method, eta=eta, reps=reps, step=k, series="discrete"))
        rows.append(_row("sde_validation", "mean_loss", float(ef_s[k]),
                         method=method, eta=eta, reps=reps, step=k, series="sde"))
    return {
        "rows": rows,
        "report": {
            "method": method,
            "mean_rel_discrepancy_f": float(rel_f.mean()),
            "max_rel_discrepancy_f": float(rel_f.max()),
            "mean_rel_discrepancy_grad": float(rel_g.mean()),
        },
    }


# ---------------------------------------------------------------------------
# scaling (Protocol A)


def _scaling_cell(cfg: dict, method: str, sigma_dp: float, seed: int) -> dict:
    obj = _quadratic_from(cfg)
    noise = NoiseSpec(float(cfg["sigma_gamma"]), math.inf, int(cfg["B"]))
    privacy = _privacy(cfg, sigma_dp)
    oracle = SyntheticOracle(obj, noise, mode="batch")
    opt = OptimizerConfig(method=method, eta=float(cfg["eta"][method]), privacy=privacy)
    d = obj.dim
    x0 = cfg["x0_scale"] / math.sqrt(d) * np.ones(d)
    rec = run_ensemble(
        obj, oracle, opt, x0, int(cfg["T"]), int(cfg["reps"]), seed=seed,
        record_every=int(cfg["record_every"]),
    )
    _maybe_save(cfg, rec, "discrete", f"scaling-{method}-sigma{sigma_dp:g}")
    mean, se = _tail_mean(rec.losses)
    eps = epsilon_from_sigma_analytic(sigma_dp, cfg["delta"], privacy.q, cfg["T"])
    diverged = bool(rec.diverged.any())
    inputs = theory.BoundInputs(
        f0=float(obj.value(x0)), mu=obj.pl_constant, L=obj.smoothness, d=d,
        eta=opt.eta, T=int(cfg["T"]), B=privacy.batch_size, n=privacy.n,
        C=privacy.clip_threshold, sigma_gamma=noise.sigma_gamma,
        delta=privacy.delta, sigma_dp=sigma_dp,
    )
    if method == DPSGD:
        floor = theory.lossbound_sgd(inputs, t=math.inf, phase=2)
    else:
        floor = theory.lossbound_sign(inputs, t=math.inf, phase=2)
    rows = [
        _row("scaling", "final_loss", mean, method=method, epsilon=eps,
             eta=opt.eta, clip=privacy.clip_threshold, batch=privacy.batch_size,
             reps=cfg["reps"], stderr=se, diverged=diverged, series=f"sigma={sigma_dp:g}"),
        _row("scaling", "theory_floor", floor, method=method, epsilon=eps,
             eta=opt.eta, clip=privacy.clip_threshold, batch=privacy.batch_size,
             series=f"sigma={sigma_dp:g}"),
    ]
    return {"rows": rows, "point": {"method": method, "sigma": sigma_dp,
                                    "epsilon": eps, "mean": mean, "se": se,
                                    "diverged": diverged}}


def _finish_scaling(cfg: dict, points: list) -> tuple[list, dict]:
    rows, report = [], {}
    for method in cfg["methods"]:
        mine = [p for p in points if p["method"] == method]
        base = next(p for p in mine if p["sigma"] == 0.0)
        live = [p for p in mine if p["sigma"] > 0.0 and not p["diverged"]]
        eps = np.array([p["epsilon"] for p in live])
        y = np.array([p["mean"] for p in live])
        try:
            fit = fit_power_law(eps, y, baseline=base["mean"])
        except ValueError as exc:
            print(f"scaling fit skipped for {method}: {exc}", file=sys.stderr)
            fit = FitResult(math.nan, math.nan, math.nan, 0, len(live))
        rows.append(_row("scaling", "excess_slope", fit.slope, method=method,
                         reps=cfg["reps"]))
        rows.append(_row("scaling", "excess_r2", fit.r2, method=method,
                         reps=cfg["reps"]))
        rows.append(_row("scaling", "baseline_loss", base["mean"], method=method,
                         reps=cfg["reps"], stderr=base["se"]))
        for p in live:
            rows.append(_row("scaling", "excess_loss", p["mean"] - base["mean"],
                             method=method, epsilon=p["epsilon"], stderr=p["se"],
                             reps=cfg["reps"], series=f"sigma={p['sigma']:g}"))
        report[method] = {"slope": fit.slope, "r2": fit.r2, "baseline": base["mean"]}
    rows.append(_row("scaling", "fit_tolerance", float(cfg["fit_tolerance"])))
    return rows, report


# ---------------------------------------------------------------------------
# speed


def _speed_cell(cfg: dict, method: str, sigma_dp: float, seed: int) -> dict:
    obj = _quadratic_from(cfg)
    noise = NoiseSpec(float(cfg["sigma_gamma"]), math.inf, int(cfg["B"]))
    privacy = _privacy(cfg, sigma_dp)
    oracle = SyntheticOracle(obj, noise, mode="batch")
    opt = OptimizerConfig(method=method, eta=float(cfg["eta"][method]), privacy=privacy)
    d = obj.dim
    x0 = float(cfg["x0_coord"]) * np.ones(d)
    f0 = float(obj.value(x0))
    rec = run_ensemble(
        obj, oracle, opt, x0, int(cfg["T"]), int(cfg["reps"]), seed=seed,
        record_every=int(cfg["record_every"]),
    )
    _maybe_save(cfg, rec, "discrete", f"speed-{method}-sigma{sigma_dp:g}")
    mean_curve = rec.losses.mean(axis=1)
    t_half = _first_crossing(rec.steps, mean_curve, f0 / 2.0)
    eps = epsilon_from_sigma_analytic(sigma_dp, cfg["delta"], privacy.q, cfg["T"])
    frac_div = float(rec.diverged.mean())
    rows = [
        _row("speed", "t_half", t_half, method=method, epsilon=eps, eta=opt.eta,
             batch=privacy.batch_size, reps=cfg["reps"],
             diverged=frac_div > 0.5, series=f"sigma={sigma_dp:g}"),
        _row("speed", "diverged_fraction", frac_div, method=method, epsilon=eps,
             eta=opt.eta, reps=cfg["reps"], series=f"sigma={sigma_dp:g}"),
    ]
    stride = max(1, int(cfg["curve_every"]) // int(cfg["record_every"]))
    for idx in range(0, len(rec.steps), stride):
        rows.append(_row("speed", "mean_loss", float(mean_curve[idx]), method=method,
                         epsilon=eps, eta=opt.eta, reps=cfg["reps"],
                         step=int(rec.steps[idx]), series=f"sigma={sigma_dp:g}"))
    return {"rows": rows, "point": {"method": method, "sigma": sigma_dp,
                                    "epsilon": eps, "t_half": t_half,
                                    "diverged_fraction": frac_div}}


def _first_crossing(steps, curve, level) -> float:
    """First (interpolated) step where the curve drops below ``level``; inf if never."""
    below = np.where(curve <= level)[0]
    if below.size == 0:
        return math.inf
    i = int(below[0])
    if i == 0:
        return float(steps[0])
    s0, s1 = steps[i - 1], steps[i]
    c0, c1 = curve[i - 1], curve[i]
    w = (c0 - level) / (c0 - c1)
    return float(s0 + w * (s1 - s0))


# ---------------------------------------------------------------------------
# epsstar


def _epsstar_cell(cfg: dict, B: int, method: str, eps: float, seed: int) -> dict:
    obj = _quadratic_from(cfg)
    noise = NoiseSpec(float(cfg["sigma_gamma"]), math.inf, int(B))
    privacy = PrivacyParams(
        delta=float(cfg["delta"]), n=int(cfg["n"]), batch_size=int(B),
        steps=int(cfg["T"]), clip_threshold=float(cfg["C"]), epsilon=float(eps),
    )
    oracle = SyntheticOracle(obj, noise, mode="batch")
    opt = OptimizerConfig(method=method, eta=float(cfg["eta"][method]), privacy=privacy)
    d = obj.dim
    x0 = float(cfg["x0_coord"]) * np.ones(d)
    rec = run_ensemble(
        obj, oracle, opt, x0, int(cfg["T"]), int(cfg["reps"]), seed=seed,
        record_every=int(cfg["record_every"]),
    )
    _maybe_save(cfg, rec, "discrete", f"epsstar-B{B}-{method}-eps{eps:g}")
    mean, se = _tail_mean(rec.losses)
    rows = [
        _row("epsstar", "final_loss", mean, method=method, epsilon=eps,
             eta=opt.eta, clip=cfg["C"], batch=B, reps=cfg["reps"], stderr=se,
             diverged=bool(rec.diverged.any()), series=f"B={B}"),
    ]
    return {"rows": rows, "point": {"B": B, "method": method, "epsilon": eps,
                                    "mean": mean, "se": se}}


def _finish_epsstar(cfg: dict, points: list) -> tuple[list, dict]:
    rows, report = [], {"crossings": {}, "epsilon_star": {}}
    for B in cfg["batch_grid"]:
        sel = {m: sorted((p for p in points if p["B"] == B and p["method"] == m),
                         key=lambda p: p["epsilon"]) for m in cfg["methods"]}
        eps = np.array([p["epsilon"] for p in sel[DPSGD]])
        la = np.array([p["mean"] for p in sel[DPSGD]])
        lb = np.array([p["mean"] for p in sel[DPSIGNSGD]])
        sa = np.array([p["se"] for p in sel[DPSGD]])
        sb = np.array([p["se"] for p in sel[DPSIGNSGD]])
        cross = detect_crossing(eps, la, lb, sa, sb)
        star = epsilon_star(cfg["C"], cfg["T"], B, cfg["n"], cfg["sigma_gamma"], cfg["delta"])
        report["epsilon_star"][B] = star
        rows.append(_row("epsstar", "epsilon_star_theory", star, batch=B))
        if cross.crossing is not None:
            report["crossings"][B] = cross.crossing
            sig = cross.significant[0] if cross.significant else False
            rows.append(_row("epsstar", "crossing", cross.crossing, batch=B,
                             series="significant" if sig else ""))
        else:
            report["crossings"][B] = None
            rows.append(_row("epsstar", "crossing", math.nan, batch=B))
        if not cross.monotone:
            rows.append(_row("epsstar", "crossing_multiple", len(cross.crossings), batch=B))
    return rows, report


# ---------------------------------------------------------------------------
# protocol B


def _protocol_b_cell(cfg: dict, method: str, eps: float, eta: float, C: float,
                     seed: int) -> dict:
    obj = _quadratic_from(cfg)
    noise = NoiseSpec(float(cfg["sigma_gamma"]), math.inf, int(cfg["B"]))
    privacy = PrivacyParams(
        delta=float(cfg["delta"]), n=int(cfg["n"]), batch_size=int(cfg["B"]),
        steps=int(cfg["T"]), clip_threshold=float(C), epsilon=float(eps),
    )
    oracle = SyntheticOracle(obj, noise, mode="batch")
    opt = OptimizerConfig(method=method, eta=float(eta), privacy=privacy)
    d = obj.dim
    x0 = float(cfg["x0_coord"]) * np.ones(d)
    rec = run_ensemble(
        obj, oracle, opt, x0, int(cfg["T"]), int(cfg["reps"]), seed=seed,
        record_every=int(cfg["record_every"]),
    )
    _maybe_save(cfg, rec, "discrete", f"protocolb-{method}-eps{eps:g}-eta{eta:g}-C{C:g}")
    mean, se = _tail_mean(rec.losses)
    diverged = bool(rec.diverged.mean() > 0.5)
    rows = [
        _row("protocol_b", "grid_loss", mean, method=method, epsilon=eps, eta=eta,
             clip=C, batch=cfg["B"], reps=cfg["reps"], stderr=se, diverged=diverged),
    ]
    return {"rows": rows, "point": {"method": method, "epsilon": eps, "eta": eta,
                                    "C": C, "mean": mean, "se": se,
                                    "diverged": diverged}}


def _finish_protocol_b(cfg: dict, points: list) -> tuple[list, dict]:
    rows, report = [], {}
    sgd_base_min = float(cfg["sgd_base_eta_min"])

    def best_of(cands):
        # ties broken by smaller eta, then smaller C
        ok = [p for p in cands if not p["diverged"] and np.isfinite(p["mean"])]
        if not ok:
            return None
        return min(ok, key=lambda p: (p["mean"], p["eta"], p["C"]))

    variants = {m: m for m in cfg["methods"]}
    variants["dpsgd_tuned"] = DPSGD  # extended grid, Fig-4 style

    for label, method in variants.items():
        best_rows = []
        for eps in cfg["eps_grid"]:
            cands = [p for p in points if p["method"] == method
                     and math.isclose(p["epsilon"], eps)]
            if label == DPSGD:
                cands = [p for p in cands if p["eta"] >= sgd_base_min]
            best = best_of(cands)
            if best is None:
                rows.append(_row("protocol_b", "best_loss", math.nan, method=label,
                                 epsilon=eps, diverged=1))
                continue
            best_rows.append(best)
            rows.append(_row("protocol_b", "best_loss", best["mean"], method=label,
                             epsilon=eps, eta=best["eta"], clip=best["C"],
                             reps=cfg["reps"], stderr=best["se"]))
        if len(best_rows) >= 3:
            eps_arr = np.array([p["epsilon"] for p in best_rows])
            eta_arr = np.array([p["eta"] for p in best_rows])
            slope, intercept = np.polyfit(np.log(eps_arr), np.log(eta_arr), 1)
            pred = slope * np.log(eps_arr) + intercept
            ss_res = float(np.sum((np.log(eta_arr) - pred) ** 2))
            ss_tot = float(np.sum((np.log(eta_arr) - np.log(eta_arr).mean()) ** 2))
            r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
            rows.append(_row("protocol_b", "lr_slope", float(slope), method=label))
            rows.append(_row("protocol_b", "lr_slope_r2", r2, method=label))
            report[label] = {
                "lr_slope": float(slope),
                "best": {float(p["epsilon"]): p for p in best_rows},
            }
    return rows, report


# ---------------------------------------------------------------------------
# stationary


def _stationary_cell(cfg: dict, method: str, seed: int) -> dict:
    obj = Quadratic(np.asarray(cfg["eigenvalues"], dtype=float))
    noise = NoiseSpec(float(cfg["sigma_gamma"]), math.inf, int(cfg["B"]))
    privacy = _privacy(cfg, cfg["sigma_dp"])
    oracle = SyntheticOracle(obj, noise, mode="batch")
    opt = OptimizerConfig(method=method, eta=float(cfg["eta"]), privacy=privacy)
    x0 = np.asarray(cfg["x0"], dtype=float)
    T = int(cfg["T"])
    checkpoints = [int(c) for c in cfg["checkpoints"]]
    every = math.gcd(*checkpoints) if len(checkpoints) > 1 else checkpoints[0]
    rec = run_ensemble(
        obj, oracle, opt, x0, T, int(cfg["reps"]), seed=seed, record_every=every,
        observables={"x": lambda xs: xs.copy()},
    )
    _maybe_save(cfg, rec, "discrete", f"stationary-{method}")
    xs = rec.observables["x"]  # (n_rec, reps, d)
    step_index = {int(s): i for i, s in enumerate(rec.steps)}
    inputs = theory.BoundInputs(
        f0=float(obj.value(x0)), mu=obj.pl_constant, L=obj.smoothness, d=obj.dim,
        eta=opt.eta, T=T, B=privacy.batch_size, n=privacy.n,
        C=privacy.clip_threshold, sigma_gamma=noise.sigma_gamma,
        delta=privacy.delta, sigma_dp=privacy.sigma_dp,
    )
    theory_fn = theory.stationary_sgd if method == DPSGD else theory.stationary_sign
    rows, zs = [], []
    for k in checkpoints:
        snap = xs[step_index[k]]
        mean, var, se_mean, se_var = estimate_moments(snap, axis=0)
        t = k * opt.eta
        mean_th, var_th = theory_fn(obj.eigenvalues, x0, inputs, t)
        z_mean = (mean - mean_th) / se_mean
        z_var = (var - var_th) / se_var
        for i in range(obj.dim):
            series = f"mode{i}"
            rows.extend([
                _row("stationary", "mean_emp", float(mean[i]), method=method,
                     eta=opt.eta, reps=cfg["reps"], stderr=float(se_mean[i]),
                     step=k, series=series),
                _row("stationary", "mean_theory", float(mean_th[i]), method=method,
                     eta=opt.eta, step=k, series=series),
                _row("stationary", "mean_z", float(z_mean[i]), method=method,
                     eta=opt.eta, step=k, series=series),
                _row("stationary", "var_emp", float(var[i]), method=method,
                     eta=opt.eta, reps=cfg["reps"], stderr=float(se_var[i]),
                     step=k, series=series),
                _row("stationary", "var_theory", float(var_th[i]), method=method,
                     eta=opt.eta, step=k, series=series),
                _row("stationary", "var_z", float(z_var[i]), method=method,
                     eta=opt.eta, step=k, series=series),
            ])
            zs.extend([float(z_mean[i]), float(z_var[i])])
    return {"rows": rows, "report": {"method": method, "z_scores": zs}}


# ---------------------------------------------------------------------------
# cell expansion and the pool


def expand_cells(experiment: str, cfg: dict) -> list[tuple]:
    """Deterministic cell list; cell index = position in this list."""
    if experiment == "sde_validation":
        return [(m,) for m in cfg["methods"]]
    if experiment == "scaling":
        grid = [0.0] + [s for s in cfg["sigma_grid"]]
        return [(m, float(s)) for m in cfg["methods"] for s in grid]
    if experiment == "speed":
        grid = list(cfg["sigma_grid"]) + [cfg["sigma_diverge"]]
        return [(m, float(s)) for m in cfg["methods"] for s in grid]
    if experiment == "epsstar":
        return [
            (int(B), m, float(e))
            for B in cfg["batch_grid"]
            for m in cfg["methods"]
            for e in cfg["eps_grid"]
        ]
    if experiment == "protocol_b":
        cells = []
        for m in cfg["methods"]:
            for e in cfg["eps_grid"]:
                for eta in cfg["eta_grid"]:
                    for C in cfg["C_grid"]:
                        cells.append((m, float(e), float(eta), float(C)))
        return cells
    if experiment == "stationary":
        return [(m,) for m in cfg["methods"]]
    raise ValueError(f"unknown experiment {experiment!r}")


_CELL_FNS = {
    "sde_validation": _sde_validation_cell,
    "scaling": _scaling_cell,
    "speed": _speed_cell,
    "epsstar": _epsstar_cell,
    "protocol_b": _protocol_b_cell,
    "stationary": _stationary_cell,
}


def _run_cell(args):
    experiment, cfg, cell, seed = args
    return _CELL_FNS[experiment](cfg, *cell, seed)


def run_experiment(
    experiment: str,
    cfg: dict,
    master_seed: int,
    workers: int = 1,
    progress=None,
    trajectory_dir=None,
) -> dict:
    """Run all cells, then any cross-cell reduction; returns rows + report.

    ``trajectory_dir`` enables per-trajectory CSV dumps, one file per cell.
    """
    if trajectory_dir is not None:
        cfg = {**cfg, "_trajectory_dir": str(trajectory_dir)}
    cells = expand_cells(experiment, cfg)
    jobs = [
        (experiment, cfg, cell, _cell_seed(master_seed, _seed_key(experiment, cfg, cell, idx)))
        for idx, cell in enumerate(cells)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs, chunksize=1))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_run_cell(job))
            if progress:
                progress(i + 1, len(jobs))
    rows = [r for res in results for r in res["rows"]]
    report: dict = {"experiment": experiment, "cells": len(cells)}
    points = [res["point"] for res in results if "point" in res]
    if experiment == "scaling":
        extra, rep = _finish_scaling(cfg, points)
        rows += extra
        report["fits"] = rep
    elif experiment == "epsstar":
        extra, rep = _finish_epsstar(cfg, points)
        rows += extra
        report.update(rep)
    elif experiment == "protocol_b":
        extra, rep = _finish_protocol_b(cfg, points)
        rows += extra
        report["methods"] = rep
    elif experiment == "speed":
        report["points"] = points
    else:
        report["reports"] = [res["report"] for res in results if "report" in res]
    report["rows"] = len(rows)
    return {"rows": rows, "report": report}


# ---------------------------------------------------------------------------
# persistence


def write_results_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("value", "stderr", "epsilon", "eta", "clip"):
                if isinstance(out.get(key), float):
                    out[key] = repr(out[key])
            writer.writerow(out)


def _git_describe() -> str:
    try:
        return subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, check=True,
        ).stdout.strip()
    except Exception:
        return "unknown"


def write_manifest(path, experiment: str, cfg: dict, master_seed: int) -> None:
    manifest = {
        "experiment": experiment,
        "config": cfg,
        "seed": master_seed,
        "git": _git_describe(),
        "python": sys.version.split()[0],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=float)

"""Command-line interface.

Subcommands: simulate, sweep, accountant, theory, epsstar, validate-sde,
stationary.  Exit codes: 0 success, 1 configuration error, 2 runtime failure.
Flags override config-file fields (flags > file > defaults); every run prints
the resolved configuration before executing, and progress goes to stderr as
``cell i/N done``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from importlib import resources

import numpy as np

from . import harness, theory
from .noise import NoiseSpec
from .objectives import Quadratic
from .optimizers import OptimizerConfig, SyntheticOracle, run_optimizer, save_run_record
from .privacy import (
    PrivacyParams,
    calibrate_sigma_analytic,
    epsilon_from_sigma_analytic,
    epsilon_of_sigma_rdp,
    epsilon_star,
    phi,
    steps_for_epochs,
)


class ConfigError(Exception):
    pass


def _load_sweep_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    import jsonschema

    schema = json.loads(
        resources.files("dpsde").joinpath("sweep_schema.json").read_text()
    )
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config file {path} violates the sweep schema: {exc.message}")
    return doc


def _echo(resolved: dict) -> None:
    print("resolved config:", json.dumps(resolved, indent=2, default=float))


def _progress(i: int, n: int) -> None:
    print(f"cell {i}/{n} done", file=sys.stderr)


def _emit(payload: dict, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(payload, indent=2, default=float))
    else:
        keys = list(payload)
        print(",".join(keys))
        print(",".join(str(payload[k]) for k in keys))


def cmd_accountant(args) -> int:
    if (args.sigma is None) == (args.epsilon is None):
        raise ConfigError("provide exactly one of --sigma / --epsilon")
    if args.steps is not None:
        steps = args.steps
    elif args.epochs is not None:
        steps = steps_for_epochs(args.n, args.batch, args.epochs)
    else:
        raise ConfigError("provide --steps or --epochs")
    q = args.batch / args.n
    resolved = {
        "mode": args.mode, "n": args.n, "batch": args.batch, "steps": steps,
        "delta": args.delta, "q": q, "sigma": args.sigma, "epsilon": args.epsilon,
        "seed": args.seed,
    }
    _echo(resolved)
    if args.sigma is not None:
        sigma = args.sigma
        if args.mode == "analytic":
            eps = epsilon_from_sigma_analytic(sigma, args.delta, q, steps)
        else:
            eps = epsilon_of_sigma_rdp(sigma, args.delta, q, steps)
    else:
        if args.mode == "analytic":
            sigma = calibrate_sigma_analytic(args.epsilon, args.delta, q, steps)
            eps = args.epsilon
        else:
            # invert the RDP curve in sigma by bisection; eps is decreasing in sigma
            lo, hi = 1e-3, 1e6
            target = args.epsilon
            for _ in range(200):
                mid = math.sqrt(lo * hi)
                if epsilon_of_sigma_rdp(mid, args.delta, q, steps) > target:
                    lo = mid
                else:
                    hi = mid
            sigma = hi
            eps = epsilon_of_sigma_rdp(sigma, args.delta, q, steps)
    _emit(
        {"epsilon": eps, "sigma": sigma, "q": q, "T": steps,
         "phi": phi(q, args.delta)},
        args.format,
    )
    return 0


def cmd_epsstar(args) -> int:
    resolved = vars(args).copy()
    resolved.pop("func", None)
    _echo(resolved)
    value = epsilon_star(args.C, args.T, args.batch, args.n, args.sigma_gamma, args.delta)
    _emit({"epsilon_star": value}, args.format)
    return 0


def cmd_theory(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    required = ["f0", "mu", "L", "d", "eta", "T", "B", "n", "C", "sigma_gamma", "delta"]
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ConfigError(f"theory config missing fields: {missing}")
    inputs = theory.BoundInputs(
        f0=cfg["f0"], mu=cfg["mu"], L=cfg["L"], d=cfg["d"], eta=cfg["eta"],
        T=cfg["T"], B=cfg["B"], n=cfg["n"], C=cfg["C"],
        sigma_gamma=cfg["sigma_gamma"], delta=cfg["delta"],
        nu=cfg.get("nu", math.inf), epsilon=cfg.get("epsilon"),
        sigma_dp=cfg.get("sigma_dp"),
    )
    _echo(cfg)
    t = cfg.get("t", inputs.tau)
    eta_sgd, branch = theory.optimal_lr_sgd(inputs)
    a_sgd, a_sign = theory.phase2_asymptote_pair(inputs)
    out = {
        "epsilon": inputs.epsilon,
        "sigma_dp": inputs.sigma_dp,
        "phi": inputs.phi,
        "tau": inputs.tau,
        "K1": theory.k1(inputs),
        "K2": theory.k2(inputs),
        "K3": theory.k3(inputs),
        "K4": theory.k4(inputs),
        "lossbound_sgd_phase1": theory.lossbound_sgd(inputs, t, 1),
        "lossbound_sgd_phase2": theory.lossbound_sgd(inputs, t, 2),
        "lossbound_sign_phase1": theory.lossbound_sign(inputs, t, 1),
        "lossbound_sign_phase2": theory.lossbound_sign(inputs, t, 2),
        "gradbound_sgd": theory.gradbound_sgd(inputs),
        "gradbound_sign": theory.gradbound_sign(inputs),
        "gradbound_sign_mixed": theory.gradbound_sign_mixed(inputs),
        "optimal_lr_sgd": eta_sgd,
        "optimal_lr_sgd_branch": branch,
        "optimal_lr_sign": theory.optimal_lr_sign(inputs),
        "phase2_asymptote_sgd": a_sgd,
        "phase2_asymptote_sign": a_sign,
        "epsilon_star": theory.compare_utility(inputs).epsilon_star,
    }
    print(json.dumps(out, indent=2, default=float))
    return 0


def cmd_simulate(args) -> int:
    d = args.d
    obj = Quadratic(np.full(d, args.lam))
    privacy = PrivacyParams(
        delta=args.delta, n=args.n, batch_size=args.batch, steps=args.steps,
        clip_threshold=args.C, sigma_dp=args.sigma,
    )
    noise = NoiseSpec(args.sigma_gamma, args.nu, args.batch)
    oracle = SyntheticOracle(obj, noise, mode=args.noise_mode)
    config = OptimizerConfig(method=args.method, eta=args.eta, privacy=privacy,
                             schedule=args.schedule, sampling=args.sampling)
    resolved = vars(args).copy()
    resolved.pop("func", None)
    _echo(resolved)
    rng = np.random.default_rng(args.seed)
    x0 = args.x0_scale / math.sqrt(d) * rng.standard_normal(d)
    record = run_optimizer(obj, oracle, config, x0, args.steps, seed=args.seed,
                           record_every=args.record_every)
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "run.csv")
    save_run_record(record, out)
    print(json.dumps({
        "final_loss": float(record.losses[-1]),
        "diverged": record.diverged,
        "csv": out,
    }, indent=2))
    return 0


_EXPERIMENT_COMMANDS = {"validate-sde": "sde_validation", "stationary": "stationary"}


def _run_harness(experiment: str, cfg_overrides: dict, seed: int, workers: int,
                 out_dir: str, dry_run: bool, save_trajectories: bool = False) -> int:
    cfg = harness.default_config(experiment, cfg_overrides)
    resolved = {"experiment": experiment, "seed": seed, "workers": workers,
                "output_dir": out_dir, "save_trajectories": save_trajectories,
                "config": cfg}
    _echo(resolved)
    cells = harness.expand_cells(experiment, cfg)
    if dry_run:
        for i, cell in enumerate(cells):
            print(f"cell {i}: {cell}")
        return 0
    trajectory_dir = os.path.join(out_dir, "trajectories") if save_trajectories else None
    result = harness.run_experiment(experiment, cfg, seed, workers=workers,
                                    progress=_progress,
                                    trajectory_dir=trajectory_dir)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    harness.write_results_csv(result["rows"], csv_path)
    harness.write_manifest(os.path.join(out_dir, "manifest.json"), experiment, cfg, seed)
    print(json.dumps({"results": csv_path, "report": result["report"]},
                     indent=2, default=float))
    return 0


def cmd_sweep(args) -> int:
    doc = _load_sweep_config(args.config)
    experiment = doc["experiment"]
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    out_dir = args.out_dir or doc.get("output_dir", "results")
    save = args.save_trajectories or doc.get("save_trajectories", False)
    return _run_harness(experiment, doc.get("config", {}), seed, args.workers,
                        out_dir, args.dry_run, save)


def cmd_experiment(args) -> int:
    experiment = _EXPERIMENT_COMMANDS[args.command]
    overrides = {}
    if args.config:
        doc = _load_sweep_config(args.config)
        if doc["experiment"] != experiment:
            raise ConfigError(
                f"config is for {doc['experiment']!r}, not {experiment!r}")
        overrides = doc.get("config", {})
    return _run_harness(experiment, overrides, args.seed, args.workers,
                        args.out_dir, args.dry_run, args.save_trajectories)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpsde")
    sub = parser.add_subparsers(dest="command", required=True)

    acc = sub.add_parser("accountant", help="privacy accounting")
    acc.add_argument("--n", type=int, required=True)
    acc.add_argument("--batch", type=int, required=True)
    acc.add_argument("--epochs", type=int)
    acc.add_argument("--steps", type=int)
    acc.add_argument("--delta", type=float, required=True)
    acc.add_argument("--sigma", type=float)
    acc.add_argument("--epsilon", type=float)
    acc.add_argument("--mode", choices=["analytic", "rdp"], default="analytic")
    acc.add_argument("--format", choices=["json", "csv"], default="json")
    acc.add_argument("--seed", type=int, default=0)
    acc.set_defaults(func=cmd_accountant)

    star = sub.add_parser("epsstar", help="critical privacy budget")
    star.add_argument("--C", type=float, required=True)
    star.add_argument("--T", type=int, required=True)
    star.add_argument("--batch", type=int, required=True)
    star.add_argument("--n", type=int, required=True)
    star.add_argument("--sigma-gamma", dest="sigma_gamma", type=float, required=True)
    star.add_argument("--delta", type=float, required=True)
    star.add_argument("--format", choices=["json", "csv"], default="json")
    star.add_argument("--seed", type=int, default=0)
    star.set_defaults(func=cmd_epsstar)

    theo = sub.add_parser("theory", help="evaluate closed-form expressions")
    theo.add_argument("--config", required=True)
    theo.add_argument("--seed", type=int, default=0)
    theo.set_defaults(func=cmd_theory)

    sim = sub.add_parser("simulate", help="single optimizer trajectory")
    sim.add_argument("--method", choices=["dpsgd", "dpsignsgd", "dpadam"],
                     required=True)
    sim.add_argument("--d", type=int, default=64)
    sim.add_argument("--lam", type=float, default=1.0)
    sim.add_argument("--eta", type=float, required=True)
    sim.add_argument("--steps", type=int, required=True)
    sim.add_argument("--n", type=int, default=10000)
    sim.add_argument("--batch", type=int, default=1)
    sim.add_argument("--C", type=float, default=5.0)
    sim.add_argument("--sigma", type=float, default=0.0)
    sim.add_argument("--sigma-gamma", dest="sigma_gamma", type=float, default=0.0)
    sim.add_argument("--nu", type=float, default=math.inf)
    sim.add_argument("--delta", type=float, default=1e-5)
    sim.add_argument("--x0-scale", dest="x0_scale", type=float, default=1.0)
    sim.add_argument("--schedule", choices=["decay06"], default=None)
    sim.add_argument("--sampling", choices=["poisson", "shuffle"], default="poisson")
    sim.add_argument("--noise-mode", dest="noise_mode",
                     choices=["per-example", "batch"], default="per-example")
    sim.add_argument("--record-every", dest="record_every", type=int, default=1)
    sim.add_argument("--out-dir", dest="out_dir", default="results")
    sim.add_argument("--seed", type=int, default=0)
    sim.set_defaults(func=cmd_simulate)

    sweep = sub.add_parser("sweep", help="run a sweep from a JSON config")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    sweep.add_argument("--out-dir", dest="out_dir", default=None)
    sweep.add_argument("--dry-run", dest="dry_run", action="store_true")
    sweep.add_argument("--save-trajectories", dest="save_trajectories",
                       action="store_true")
    sweep.set_defaults(func=cmd_sweep)

    for name in _EXPERIMENT_COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} experiment")
        cmd.add_argument("--config", default=None)
        cmd.add_argument("--seed", type=int, default=0)
        cmd.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        cmd.add_argument("--out-dir", dest="out_dir", default="results")
        cmd.add_argument("--dry-run", dest="dry_run", action="store_true")
        cmd.add_argument("--save-trajectories", dest="save_trajectories",
                         action="store_true")
        cmd.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; map to config-error code 1
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PermissionError as exc:
        print(f"output not writable: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

"""Generate the golden results.csv used by the renderer tests.

One small deterministic run of every experiment, concatenated into a single
long-format CSV.  Run from the repository root:

    python3 figures/scripts/make_golden.py
"""

import pathlib

from dpsde import harness

OUT = pathlib.Path(__file__).resolve().parent.parent / "tests" / "data" / "golden_results.csv"

MINI = {
    "sde_validation": {"d": 16, "T": 400, "reps": 80},
    "scaling": {
        "d": 16, "lam": 1.0, "T": 1200, "reps": 150, "record_every": 10,
        "B": 8, "C": 2.0, "sigma_gamma": 0.01, "x0_scale": 1.0,
        "sigma_grid": [0.5, 1.0, 2.0, 4.0],
        "eta": {"dpsgd": 0.02, "dpsignsgd": 0.004, "dpadam": 0.004},
    },
    "speed": {
        "d": 16, "T": 600, "reps": 100, "curve_every": 30,
        "sigma_grid": [0.012, 0.024, 0.048], "sigma_diverge": 2.0e6,
        "eta": {"dpsgd": 3.5e-4, "dpsignsgd": 5e-5}, "x0_coord": 0.01,
    },
    "epsstar": {"d": 8, "T": 1500, "reps": 200, "record_every": 100},
    "protocol_b": {
        "reps": 24, "T": 600, "C_grid": [2.0],
        "eta_grid": [0.0002, 0.0005, 0.001, 0.002, 0.004, 0.008],
    },
    "stationary": {"reps": 2000, "T": 1500,
                   "checkpoints": [250, 500, 1000, 1500]},
}


def main() -> None:
    OUT.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for experiment, overrides in MINI.items():
        cfg = harness.default_config(experiment, overrides)
        result = harness.run_experiment(experiment, cfg, master_seed=7)
        rows.extend(result["rows"])
        print(f"{experiment}: {len(result['rows'])} rows")
    harness.write_results_csv(rows, OUT)
    print(f"wrote {OUT} ({len(rows)} rows)")


if __name__ == "__main__":
    main()

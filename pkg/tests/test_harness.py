import csv
import math

import numpy as np
import pytest

from dpsde import harness
from dpsde.harness import (
    CrossingReport,
    detect_crossing,
    estimate_moments,
    expand_cells,
    fit_power_law,
    streaming_moments,
    write_manifest,
    write_results_csv,
)


def test_fit_power_law_exact():
    eps = np.geomspace(0.1, 2.0, 7)
    fit = fit_power_law(eps, 7.0 / eps**2)
    assert fit.slope == pytest.approx(-2.0, abs=1e-9)
    assert fit.r2 == pytest.approx(1.0, abs=1e-9)
    fit = fit_power_law(eps, 3.0 / eps)
    assert fit.slope == pytest.approx(-1.0, abs=1e-9)
    assert fit.r2 == pytest.approx(1.0, abs=1e-9)


def test_fit_power_law_mixed_model():
    eps = np.linspace(0.1, 0.5, 9)
    y = 2.0 / eps + 5.0 / eps**2
    fit = fit_power_law(eps, y)
    assert -2.0 < fit.slope < -1.0
    small = fit_power_law(np.linspace(0.01, 0.05, 9), 2.0 / np.linspace(0.01, 0.05, 9) + 5.0 / np.linspace(0.01, 0.05, 9) ** 2)
    assert small.slope < fit.slope  # closer to -2 at small eps


def test_fit_power_law_baseline_and_errors():
    eps = np.array([0.1, 0.2, 0.4, 0.8])
    y = 1.0 + 3.0 / eps  # offset power law
    fit = fit_power_law(eps, y, baseline=1.0)
    assert fit.slope == pytest.approx(-1.0, abs=1e-9)
    with pytest.raises(ValueError):
        fit_power_law(eps, np.full(4, 0.5), baseline=1.0)  # all non-positive
    dropped = fit_power_law(eps, np.array([2.0, 1.5, 1.2, 0.5]), baseline=1.0)
    assert dropped.n_dropped == 1 and dropped.n_used == 3


def test_detect_crossing_examples():
    eps = np.geomspace(0.25, 4.0, 5)  # grid contains the crossing point 1.0
    none = detect_crossing(eps, 2.0 / eps, 1.0 / eps)
    assert none.crossing is None and none.monotone
    report = detect_crossing(eps, 1.0 / eps**2, 1.0 / eps)
    assert report.crossing == pytest.approx(1.0, rel=1e-9)
    assert report.monotone
    # off-grid crossing is interpolated between the bracketing points
    coarse = detect_crossing(np.array([0.5, 2.0]), 1.0 / np.array([0.5, 2.0]) ** 2,
                             1.0 / np.array([0.5, 2.0]))
    assert 0.5 < coarse.crossing < 2.0
    with pytest.raises(ValueError):
        detect_crossing(eps[::-1], 1.0 / eps, 2.0 / eps)


def test_detect_crossing_significance_and_multiples():
    eps = np.array([0.5, 1.0, 2.0, 4.0])
    a = np.array([1.0, 0.4, 1.0, 0.2])
    b = np.array([0.5, 0.5, 0.5, 0.5])
    rep = detect_crossing(eps, a, b, se_a=np.full(4, 0.01), se_b=np.full(4, 0.01))
    assert len(rep.crossings) == 3 and not rep.monotone
    assert all(rep.significant)
    noisy = detect_crossing(eps, a, b, se_a=np.full(4, 0.4), se_b=np.full(4, 0.4))
    assert not any(noisy.significant)


def test_estimate_moments():
    const = np.full((50, 2), 3.0)
    mean, var, se_mean, _ = estimate_moments(const)
    assert np.allclose(mean, 3.0) and np.allclose(var, 0.0)
    two = np.array([[1.0], [5.0]])
    mean, var, _, _ = estimate_moments(two)
    assert mean[0] == 3.0 and var[0] == 8.0  # unbiased: ((1-3)^2+(5-3)^2)/(2-1)
    with pytest.raises(ValueError):
        estimate_moments(np.ones((1, 3)))


def test_streaming_moments_cross_check():
    rng = np.random.default_rng(0)
    values = rng.standard_normal(10**4) * 2.3 + 0.7
    mean, var = streaming_moments(values)
    m2, v2, _, _ = estimate_moments(values[:, None])
    assert abs(mean - m2[0]) < 1e-12
    assert abs(var - v2[0]) < 1e-12


def test_default_config_overrides():
    cfg = harness.default_config("scaling", {"reps": 7, "eta": {"dpsgd": 0.5}})
    assert cfg["reps"] == 7
    assert cfg["eta"]["dpsgd"] == 0.5
    assert cfg["eta"]["dpsignsgd"] == 2e-4  # untouched sibling
    assert harness.default_config("scaling")["reps"] == 100  # defaults not mutated
    with pytest.raises(ValueError):
        harness.default_config("nope")


def test_expand_cells_deterministic():
    cfg = harness.default_config("epsstar")
    cells = expand_cells("epsstar", cfg)
    assert cells == expand_cells("epsstar", cfg)
    assert len(cells) == len(cfg["batch_grid"]) * len(cfg["methods"]) * len(cfg["eps_grid"])


SMALL_SCALING = {
    "d": 8, "T": 60, "reps": 16, "record_every": 5,
    "sigma_grid": [0.5, 1.0, 2.0, 4.0], "n": 256, "B": 4,
    "eta": {"dpsgd": 0.02, "dpsignsgd": 0.002},
}


def _csv_bytes(tmp_path, name, rows):
    path = tmp_path / name
    write_results_csv(rows, path)
    return path.read_bytes()


def test_sweep_determinism_across_worker_counts(tmp_path):
    cfg = harness.default_config("scaling", SMALL_SCALING)
    outputs = []
    for workers in (1, 4, 8):
        res = harness.run_experiment("scaling", cfg, master_seed=77, workers=workers)
        outputs.append(_csv_bytes(tmp_path, f"w{workers}.csv", res["rows"]))
    assert outputs[0] == outputs[1] == outputs[2]
    # and a re-run with the same master seed is byte-identical too
    res = harness.run_experiment("scaling", cfg, master_seed=77, workers=1)
    assert _csv_bytes(tmp_path, "again.csv", res["rows"]) == outputs[0]


def test_scaling_rows_and_fit_excludes_divergence(tmp_path):
    cfg = harness.default_config("scaling", SMALL_SCALING)
    res = harness.run_experiment("scaling", cfg, master_seed=1)
    rows = res["rows"]
    finals = [r for r in rows if r["metric"] == "final_loss"]
    assert len(finals) == 2 * (1 + 4)  # methods x (baseline + grid)
    assert {r["metric"] for r in rows} >= {"final_loss", "theory_floor",
                                           "excess_loss", "excess_slope",
                                           "excess_r2", "fit_tolerance"}
    # diverged points are dropped from the fit inputs
    pts = [
        {"method": "dpsgd", "sigma": 0.0, "epsilon": math.inf, "mean": 0.1,
         "se": 0.0, "diverged": False},
        {"method": "dpsgd", "sigma": 4.0, "epsilon": 0.5, "mean": 9.0,
         "se": 0.0, "diverged": True},
    ] + [
        {"method": "dpsgd", "sigma": s, "epsilon": 1.0 / s, "mean": 0.1 + s**2,
         "se": 0.0, "diverged": False}
        for s in (1.0, 2.0, 3.0)
    ]
    extra, report = harness._finish_scaling(
        {"methods": ["dpsgd"], "reps": 1, "fit_tolerance": 0.2}, pts)
    assert report["dpsgd"]["slope"] == pytest.approx(-2.0, abs=1e-9)


def test_write_results_csv_schema(tmp_path):
    rows = [harness._row("scaling", "final_loss", 0.125, method="dpsgd",
                         epsilon=1.0, stderr=0.01)]
    path = tmp_path / "results.csv"
    write_results_csv(rows, path)
    with open(path) as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == harness.CSV_COLUMNS
        row = next(reader)
    assert row["experiment"] == "scaling"
    assert float(row["value"]) == 0.125
    assert row["diverged"] == "0"


def test_write_manifest(tmp_path):
    path = tmp_path / "manifest.json"
    write_manifest(path, "scaling", {"reps": 3}, 123)
    import json

    doc = json.loads(path.read_text())
    assert doc["experiment"] == "scaling"
    assert doc["seed"] == 123
    assert doc["config"] == {"reps": 3}
    assert "git" in doc


def test_first_crossing_interpolation():
    steps = np.array([0, 10, 20])
    curve = np.array([4.0, 2.0, 1.0])
    assert harness._first_crossing(steps, curve, 3.0) == pytest.approx(5.0)
    assert math.isinf(harness._first_crossing(steps, curve, 0.5))
    assert harness._first_crossing(steps, curve, 5.0) == 0.0


def test_tail_mean_window():
    losses = np.tile(np.arange(10.0)[:, None], (1, 4))  # (n_rec, paths)
    mean, se = harness._tail_mean(losses, window=5)
    assert mean == pytest.approx(7.0)  # mean of 5..9
    assert se == 0.0


def test_doubling_reps_shrinks_se_by_sqrt2():
    rng = np.random.default_rng(3)
    sample = rng.standard_normal(4000)
    _, _, se_r, _ = estimate_moments(sample[:2000, None])
    _, _, se_2r, _ = estimate_moments(sample[:, None])
    assert se_r[0] / se_2r[0] == pytest.approx(math.sqrt(2.0), rel=0.10)

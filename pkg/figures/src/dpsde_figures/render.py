"""Batch figure rendering from a harness results.csv.

Strictly file-driven: everything plotted comes from the long-format CSV
(experiment, method, epsilon, eta, clip, batch, reps, metric, value, stderr,
diverged, step, series); no simulation happens here.  Each render writes the
image plus a `<out>.points.json` sidecar holding the exact plotted
coordinates, so re-renders of the same CSV can be diffed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("scaling", "speed", "epsstar", "protocol_b", "stationary", "sde_validate")

REQUIRED_COLUMNS = [
    "experiment", "method", "epsilon", "eta", "clip", "batch", "reps",
    "metric", "value", "stderr", "diverged", "step", "series",
]

_EXPERIMENT_OF_KIND = {
    "scaling": "scaling",
    "speed": "speed",
    "epsstar": "epsstar",
    "protocol_b": "protocol_b",
    "stationary": "stationary",
    "sde_validate": "sde_validation",
}

METHOD_COLORS = {
    "dpsgd": "tab:blue",
    "dpsgd_tuned": "tab:cyan",
    "dpsignsgd": "tab:orange",
    "dpadam": "tab:green",
}


@dataclass
class FigureSpec:
    kind: str
    csv_path: str
    out_path: str
    dpi: int = 120

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")


def _f(raw: str) -> float:
    if raw in ("", None):
        return math.nan
    return float(raw)


def load_rows(csv_path: str) -> list[dict]:
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise ValueError(f"{csv_path}: missing required column {col!r}")
        rows = []
        for rec in reader:
            rows.append({
                "experiment": rec["experiment"],
                "method": rec["method"],
                "epsilon": _f(rec["epsilon"]),
                "eta": _f(rec["eta"]),
                "clip": _f(rec["clip"]),
                "batch": _f(rec["batch"]),
                "metric": rec["metric"],
                "value": _f(rec["value"]),
                "stderr": _f(rec["stderr"]),
                "diverged": rec["diverged"] not in ("", "0"),
                "step": _f(rec["step"]),
                "series": rec["series"],
            })
    return rows


def _select(rows, **filters):
    out = [r for r in rows if all(r.get(k) == v for k, v in filters.items())]
    if not out:
        desc = ", ".join(f"{k}={v!r}" for k, v in filters.items())
        raise ValueError(f"empty selection after filtering on {desc}")
    return out


def _methods(rows):
    return sorted({r["method"] for r in rows if r["method"]})


def render(spec: FigureSpec) -> dict:
    """Render one figure; returns the serialized point layer."""
    rows = load_rows(spec.csv_path)
    experiment = _EXPERIMENT_OF_KIND[spec.kind]
    rows = _select(rows, experiment=experiment)
    builder = {
        "scaling": _render_scaling,
        "speed": _render_speed,
        "epsstar": _render_epsstar,
        "protocol_b": _render_protocol_b,
        "stationary": _render_stationary,
        "sde_validate": _render_sde_validate,
    }[spec.kind]
    fig, points = builder(rows)
    fig.savefig(spec.out_path, dpi=spec.dpi)
    plt.close(fig)
    points["kind"] = spec.kind
    with open(str(spec.out_path) + ".points.json", "w") as fh:
        json.dump(points, fh, indent=2, sort_keys=True)
    return points


def _sorted_xy(rows, xkey="epsilon"):
    rows = sorted(rows, key=lambda r: r[xkey])
    return ([r[xkey] for r in rows], [r["value"] for r in rows],
            [r["stderr"] for r in rows], [r["diverged"] for r in rows])


def _render_scaling(rows):
    finals = _select(rows, metric="final_loss")
    floors = [r for r in rows if r["metric"] == "theory_floor"]
    tol_rows = [r for r in rows if r["metric"] == "fit_tolerance"]
    tol = tol_rows[0]["value"] if tol_rows else math.nan

    fig, ax = plt.subplots(figsize=(6, 4.5))
    points = {"panels": [], "checks": {}}
    gaps = []
    series_out = []
    for method in _methods(finals):
        mine = [r for r in finals if r["method"] == method
                and math.isfinite(r["epsilon"])]
        x, y, err, div = _sorted_xy(mine)
        live = [(a, b, e) for a, b, e, f in zip(x, y, err, div) if not f]
        dead = [(a, b) for a, b, _, f in zip(x, y, err, div) if f]
        if live:
            lx, ly, le = zip(*live)
            ax.errorbar(lx, ly, yerr=le, marker="o", linestyle="-",
                        color=METHOD_COLORS.get(method), label=method)
        if dead:
            dx, dy = zip(*dead)
            ax.plot(dx, dy, marker="o", linestyle="none", fillstyle="none",
                    color=METHOD_COLORS.get(method))
        series_out.append({"label": method, "x": x, "y": y,
                           "diverged": div})
        # theory overlay and the reference-line gap check
        th = sorted((r for r in floors if r["method"] == method
                     and math.isfinite(r["epsilon"])), key=lambda r: r["epsilon"])
        if th:
            tx = [r["epsilon"] for r in th]
            ty = [r["value"] for r in th]
            ax.plot(tx, ty, linestyle="--", color=METHOD_COLORS.get(method),
                    alpha=0.7, label=f"{method} theory")
            series_out.append({"label": f"{method}:theory", "x": tx, "y": ty})
            th_at = {r["epsilon"]: r["value"] for r in th}
            for a, b, _ in live:
                if a in th_at and th_at[a] > 0:
                    gaps.append(abs(b - th_at[a]) / th_at[a])
    # reference slope lines anchored at the largest live epsilon
    ref = [(r["epsilon"], r["value"]) for r in finals
           if not r["diverged"] and math.isfinite(r["epsilon"])]
    if ref:
        x1, y1 = max(ref)
        xs = sorted({a for a, _ in ref})
        for power, style in ((-1.0, ":"), (-2.0, "-.")):
            ys = [y1 * (x / x1) ** power for x in xs]
            ax.plot(xs, ys, linestyle=style, color="gray",
                    label=f"1/eps^{int(-power)}")
            series_out.append({"label": f"ref:eps^{power:g}", "x": xs, "y": ys})
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("privacy budget eps")
    ax.set_ylabel("final training loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    gap = max(gaps) if gaps else math.nan
    points["panels"].append({"label": "scaling", "series": series_out})
    points["checks"]["fig1_max_gap"] = gap
    points["checks"]["fit_tolerance"] = tol
    points["checks"]["gap_ok"] = bool(gaps) and math.isfinite(tol) and gap <= tol
    return fig, points


def _render_speed(rows):
    curves = _select(rows, metric="mean_loss")
    methods = _methods(curves)
    fig, axes = plt.subplots(1, len(methods), figsize=(4.5 * len(methods), 3.6),
                             squeeze=False)
    points = {"panels": []}
    for ax, method in zip(axes[0], methods):
        mine = [r for r in curves if r["method"] == method]
        series_out = []
        for label in sorted({r["series"] for r in mine}):
            sel = sorted((r for r in mine if r["series"] == label),
                         key=lambda r: r["step"])
            x = [r["step"] for r in sel]
            y = [r["value"] for r in sel]
            eps = sel[0]["epsilon"]
            ax.plot(x, y, label=f"eps={eps:.3g}")
            series_out.append({"label": label, "x": x, "y": y})
        ax.set_yscale("log")
        ax.set_title(method)
        ax.set_xlabel("step")
        ax.set_ylabel("mean loss")
        ax.legend(fontsize=6)
        points["panels"].append({"label": method, "series": series_out})
    fig.tight_layout()
    return fig, points


def _render_epsstar(rows):
    finals = _select(rows, metric="final_loss")
    batches = sorted({int(r["batch"]) for r in finals})
    fig, axes = plt.subplots(1, len(batches), figsize=(4.2 * len(batches), 3.6),
                             squeeze=False, sharey=True)
    points = {"panels": []}
    for ax, B in zip(axes[0], batches):
        series_out = []
        for method in _methods(finals):
            sel = [r for r in finals if r["method"] == method
                   and int(r["batch"]) == B]
            x, y, err, _ = _sorted_xy(sel)
            ax.errorbar(x, y, yerr=err, marker="o",
                        color=METHOD_COLORS.get(method), label=method)
            series_out.append({"label": method, "x": x, "y": y})
        for metric, style, name in (("crossing", "-", "crossing"),
                                    ("epsilon_star_theory", "--", "eps*")):
            vals = [r["value"] for r in rows
                    if r["metric"] == metric and int(r["batch"] or -1) == B]
            if vals and math.isfinite(vals[0]):
                ax.axvline(vals[0], linestyle=style, color="gray", alpha=0.8)
                series_out.append({"label": name, "x": [vals[0]], "y": [0.0]})
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_title(f"B = {B}")
        ax.set_xlabel("eps")
        ax.legend(fontsize=6)
        points["panels"].append({"label": f"B={B}", "series": series_out})
    fig.tight_layout()
    return fig, points


def _render_protocol_b(rows):
    best = _select(rows, metric="best_loss")
    fig, (ax_loss, ax_eta) = plt.subplots(1, 2, figsize=(9, 3.8))
    points = {"panels": []}
    loss_series, eta_series = [], []
    for method in _methods(best):
        sel = sorted((r for r in best if r["method"] == method
                      and math.isfinite(r["value"])),
                     key=lambda r: r["epsilon"])
        x = [r["epsilon"] for r in sel]
        y = [r["value"] for r in sel]
        etas = [r["eta"] for r in sel]
        ax_loss.plot(x, y, marker="o", color=METHOD_COLORS.get(method),
                     label=method)
        ax_eta.plot(x, etas, marker="s", color=METHOD_COLORS.get(method),
                    label=method)
        loss_series.append({"label": method, "x": x, "y": y})
        eta_series.append({"label": method, "x": x, "y": etas})
    for ax, ylabel in ((ax_loss, "best final loss"), (ax_eta, "best eta")):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("eps")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=6)
    fig.tight_layout()
    points["panels"].append({"label": "best_loss", "series": loss_series})
    points["panels"].append({"label": "best_eta", "series": eta_series})
    return fig, points


def _render_stationary(rows):
    methods = _methods(rows)
    fig, axes = plt.subplots(2, len(methods), figsize=(4.5 * len(methods), 6),
                             squeeze=False)
    points = {"panels": []}
    for col, method in enumerate(methods):
        mine = [r for r in rows if r["method"] == method]
        for rowi, stat in enumerate(("mean", "var")):
            ax = axes[rowi][col]
            series_out = []
            for series in sorted({r["series"] for r in mine if r["series"]}):
                for suffix, style in (("emp", "o"), ("theory", "-")):
                    sel = sorted((r for r in mine
                                  if r["series"] == series
                                  and r["metric"] == f"{stat}_{suffix}"),
                                 key=lambda r: r["step"])
                    if not sel:
                        continue
                    x = [r["step"] for r in sel]
                    y = [r["value"] for r in sel]
                    if suffix == "emp":
                        ax.plot(x, y, style, markersize=3,
                                label=f"{series} {suffix}")
                    else:
                        ax.plot(x, y, style, alpha=0.8,
                                label=f"{series} {suffix}")
                    series_out.append({"label": f"{series}:{suffix}",
                                       "x": x, "y": y})
            ax.set_title(f"{method} {stat}")
            ax.set_xlabel("step")
            ax.legend(fontsize=6)
            points["panels"].append({"label": f"{method}:{stat}",
                                     "series": series_out})
    fig.tight_layout()
    return fig, points


def _render_sde_validate(rows):
    curves = _select(rows, metric="mean_loss")
    methods = _methods(curves)
    fig, axes = plt.subplots(1, len(methods), figsize=(4.5 * len(methods), 3.6),
                             squeeze=False)
    points = {"panels": []}
    for ax, method in zip(axes[0], methods):
        series_out = []
        for source, style in (("discrete", "-"), ("sde", "--")):
            sel = sorted((r for r in curves if r["method"] == method
                          and r["series"] == source), key=lambda r: r["step"])
            x = [r["step"] for r in sel]
            y = [r["value"] for r in sel]
            ax.plot(x, y, style, label=source)
            series_out.append({"label": source, "x": x, "y": y})
        ax.set_yscale("log")
        ax.set_title(method)
        ax.set_xlabel("step")
        ax.set_ylabel("E[f]")
        ax.legend(fontsize=7)
        points["panels"].append({"label": method, "series": series_out})
    fig.tight_layout()
    return fig, points

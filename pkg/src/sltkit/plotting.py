"""Figures rendered from an experiment's summary, raw and law tables.

Everything draws on explicit ``Figure`` objects with the Agg canvas, so no
global pyplot state is touched and output is reproducible byte for byte.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}
# PNG metadata would otherwise embed the matplotlib version
_PNG_META = {"Software": None}


def _figure(width: float = 4.5, height: float = 3.0) -> Figure:
    fig = Figure(figsize=(width, height), dpi=120, layout="constrained")
    FigureCanvasAgg(fig)
    return fig


def _apply_style(ax) -> None:
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    ax.tick_params(direction="out", length=3)


def _save(fig: Figure, path: Path) -> Path:
    import matplotlib as mpl

    with mpl.rc_context(STYLE):
        fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def _f(v) -> float:
    return math.nan if v in ("", None) else float(v)


def plot_scaling(summary: list[dict], estimators: Iterable[str], path: Path, title: str = "") -> Path:
    """Replicate means with 2-standard-error bars against n (log axis)."""
    fig = _figure()
    ax = fig.add_subplot()
    _apply_style(ax)
    for est in estimators:
        rows = sorted((r for r in summary if r["estimator"] == est), key=lambda r: int(r["n"]))
        if not rows:
            continue
        n = np.array([int(r["n"]) for r in rows])
        m = np.array([_f(r["mean"]) for r in rows])
        se = np.array([_f(r["stderr"]) for r in rows])
        ax.errorbar(n, m, yerr=2 * np.nan_to_num(se), marker="o", ms=3, capsize=2, lw=1, label=est)
    ax.set_xscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("replicate mean")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_laws(laws: list[dict], path: Path) -> Path:
    """Observed value (with 2 standard errors) next to the predicted value for each law row."""
    rows = [r for r in laws if r["observed"] not in ("", None)]
    fig = _figure(5.5, 0.35 * max(len(rows), 3) + 1.0)
    ax = fig.add_subplot()
    _apply_style(ax)
    y = np.arange(len(rows))[::-1]
    obs = np.array([_f(r["observed"]) for r in rows])
    se = np.nan_to_num(np.array([_f(r["stderr"]) for r in rows]))
    pred = np.array([_f(r["predicted"]) for r in rows])
    ax.errorbar(obs, y, xerr=2 * se, fmt="o", ms=3, capsize=2, lw=1, label="observed")
    ax.scatter(pred, y, marker="x", color="k", s=18, zorder=3, label="predicted")
    labels = [f"{r['law']} (n={r['n']})" if r["n"] else r["law"] for r in rows]
    ax.set_yticks(y, labels)
    ax.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def plot_replicates(raw: list[dict], estimator: str, path: Path, reference: float | None = None) -> Path:
    """Histogram of per-replicate values of one estimator, one panel per n."""
    ns = sorted({int(r["n"]) for r in raw if r["estimator"] == estimator})
    fig = _figure(3.0 * max(len(ns), 1), 2.6)
    axes = fig.subplots(1, max(len(ns), 1), squeeze=False)[0]
    for ax, n in zip(axes, ns):
        _apply_style(ax)
        vals = np.array([_f(r["value"]) for r in raw if r["estimator"] == estimator and int(r["n"]) == n])
        vals = vals[np.isfinite(vals)]
        ax.hist(vals, bins=max(5, int(math.sqrt(vals.size))), color="0.6", edgecolor="0.3", lw=0.5)
        ax.axvline(vals.mean(), color="C0", lw=1, label="mean")
        if reference is not None:
            ax.axvline(reference, color="k", ls="--", lw=1, label="predicted")
        ax.set_title(f"{estimator}, n={n}")
    axes[0].legend(frameon=False)
    return _save(fig, path)


SCALED = ("nG_excess", "nC_excess", "nW_excess", "nT_excess", "nGW_sum", "WBIC_mle_ratio", "lambda_wbic", "lambda_volume", "nu")


def render_report(out_dir: Path, summary: list[dict], raw: list[dict], laws: list[dict], lam: float | None) -> list[Path]:
    """Write every applicable figure into ``out_dir`` and return their paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    present = [e for e in SCALED if any(r["estimator"] == e for r in summary)]
    if present:
        written.append(plot_scaling(summary, present, out_dir / "scaling.png", "n-scaled excess losses and lambda estimates"))
    if any(r["estimator"] == "F_TI_excess" for r in summary):
        written.append(plot_scaling(summary, ["F_TI_excess", "WBIC_excess"], out_dir / "free_energy.png", "free energy minus n Ln(theta0)"))
    if laws:
        written.append(plot_laws(laws, out_dir / "laws.png"))
    for est in present:
        ref = None
        if lam is not None:
            ref = 2 * lam if est == "nGW_sum" else (lam if est != "nu" and est != "nT_excess" else None)
        written.append(plot_replicates(raw, est, out_dir / f"hist_{est}.png", ref))
    return written

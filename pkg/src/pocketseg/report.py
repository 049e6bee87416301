"""Cohort reporting: a mean/std summary table per dataset and class, and
four-panel boxplot figures (DSC and Haus95, organ and tumor) written as SVG.

Figures are drawn from precomputed summary statistics so every number in
the plot equals the summarize() output; SVGs are written with fixed
metadata so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import SummaryStats, summarize

_PANELS = [
    ("dsc_organ", "DSC, organ"),
    ("dsc_tumor", "DSC, tumor"),
    ("haus95_organ", "Haus95 (mm), organ"),
    ("haus95_tumor", "Haus95 (mm), tumor"),
]


def collect_values(case_metrics) -> dict:
    """Per-metric value lists from CaseMetrics rows; undefined (None) values
    are excluded and counted."""
    out = {}
    for key, _ in _PANELS:
        vals = [getattr(m, key) for m in case_metrics]
        defined = [v for v in vals if v is not None]
        out[key] = {"values": defined, "n_undefined": len(vals) - len(defined)}
    return out


def summary_block(datasets: dict) -> str:
    """Mean/std table, one row per dataset and class.

    ``datasets`` maps a dataset name to its CaseMetrics rows.
    """
    if not datasets or all(not rows for rows in datasets.values()):
        raise ValueError("no case metrics to summarize")
    lines = [
        f"{'Dataset':<12}{'Class':<8}{'DSC mean':>10}{'DSC std':>10}"
        f"{'H95 mean':>12}{'H95 std':>11}{'n':>5}{'n undef H95':>13}"
    ]
    for name, rows in datasets.items():
        if not rows:
            raise ValueError(f"dataset {name!r} has no case metrics")
        values = collect_values(rows)
        for cls in ("organ", "tumor"):
            dsc = values[f"dsc_{cls}"]["values"]
            h95 = values[f"haus95_{cls}"]["values"]
            if not dsc:
                continue
            s_dsc = summarize(dsc)
            h_mean = f"{summarize(h95).mean:.2f}" if h95 else "n/a"
            h_std = f"{summarize(h95).std:.2f}" if h95 else "n/a"
            lines.append(
                f"{name:<12}{cls:<8}{100 * s_dsc.mean:>9.2f}%{100 * s_dsc.std:>9.2f}%"
                f"{h_mean:>12}{h_std:>11}{s_dsc.n:>5}"
                f"{values[f'haus95_{cls}']['n_undefined']:>13}"
            )
    return "\n".join(lines) + "\n"


def _bxp_stats(label: str, stats: SummaryStats) -> dict:
    return {
        "label": label,
        "med": stats.median,
        "q1": stats.q1,
        "q3": stats.q3,
        "whislo": stats.whisker_low,
        "whishi": stats.whisker_high,
        "fliers": stats.outliers,
        "mean": stats.mean,
    }


def boxplot_figure(datasets: dict, path) -> None:
    """Write the four-panel boxplot SVG (one box per dataset per panel)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "pocketseg"

    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    for ax, (key, title) in zip(axes.ravel(), _PANELS):
        boxes = []
        for name, rows in datasets.items():
            vals = collect_values(rows)[key]["values"]
            if vals:
                boxes.append(_bxp_stats(name, summarize(vals)))
        if boxes:
            ax.bxp(boxes, showmeans=True, meanline=True)
        else:
            ax.text(0.5, 0.5, "no defined values", ha="center", va="center",
                    transform=ax.transAxes)
        ax.set_title(title)
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_report(datasets: dict, out_dir) -> dict:
    """Emit summary.txt and boxplots.svg; returns the output paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.txt"
    summary_path.write_text(summary_block(datasets))
    figure_path = out_dir / "boxplots.svg"
    boxplot_figure(datasets, figure_path)
    return {"summary": str(summary_path), "figure": str(figure_path)}

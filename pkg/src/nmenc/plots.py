"""Figure rendering for evaluation reports.

Renders matplotlib figures next to the delimited report output: grouped
bars of per-source mean correlations and per-subject comparisons. Glass
brain rendering stays out of scope; the per-parcel NMEB vectors exist for
external anatomical renderers.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _grouped_bars(ax, row_labels, series_by_tag, ylabel):
    tags = sorted(series_by_tag)
    x = np.arange(len(row_labels))
    width = 0.8 / max(1, len(tags))
    for j, tag in enumerate(tags):
        vals = [series_by_tag[tag].get(label, np.nan) for label in row_labels]
        ax.bar(x + (j - (len(tags) - 1) / 2) * width, vals, width, label=tag)
    ax.set_xticks(x)
    ax.set_xticklabels(row_labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.axhline(0.0, color="k", lw=0.5)
    if len(tags) > 1:
        ax.legend(frameon=False)


def render_report_figures(by_source, by_subject, out_dir) -> list:
    """Render per-source and per-subject mean-correlation bar charts.

    by_source / by_subject: mapping (label, model_tag) -> mean rho.
    Returns the list of written figure paths.
    """
    written = []
    for name, table in (("mean_rho_by_source", by_source),
                        ("mean_rho_by_subject", by_subject)):
        if not table:
            continue
        series = {}
        labels = []
        for (label, tag), value in table.items():
            series.setdefault(tag, {})[label] = value
            if label not in labels:
                labels.append(label)
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.2))
        _grouped_bars(ax, labels, series, "mean Pearson r")
        ax.set_title(name.replace("_", " "))
        fig.tight_layout()
        path = os.path.join(out_dir, f"{name}.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written


def render_parcel_histogram(rho_by_tag, out_dir) -> str | None:
    """Histogram of per-parcel correlations, one overlay per model tag."""
    if not rho_by_tag:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for tag in sorted(rho_by_tag):
        vals = np.asarray(rho_by_tag[tag])
        vals = vals[np.isfinite(vals)]
        if vals.size:
            ax.hist(vals, bins=40, alpha=0.6, label=tag)
    ax.set_xlabel("per-parcel Pearson r")
    ax.set_ylabel("count")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = os.path.join(out_dir, "parcel_rho_hist.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path

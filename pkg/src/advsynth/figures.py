"""Benchmark figures, rendered to files from the CSV artifacts.

Plotting is deliberately kept out of the benchmark module; this reads
the delimited outputs back in, so figures can be regenerated from any
finished run directory without recomputing anything.
"""

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import evalbench

METRICS_FILE = "metrics.png"
LATENTS_FILE = "latents.png"

_SPLIT_LABELS = {"orig": "in-dist", "ood": "out-of-dist",
                 "adv": "adversarial"}


def _read_rows(path):
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _bar_panel(ax, rows, column, title):
    splits = evalbench.SPLITS
    width = 0.8 / len(evalbench.SCHEMES)
    xs = np.arange(len(splits))
    for k, scheme in enumerate(evalbench.SCHEMES):
        vals = []
        for split in splits:
            cell = next(r[column] for r in rows
                        if r["scheme"] == scheme and r["split"] == split)
            vals.append(float(cell))
        ax.bar(xs + (k - 1.5) * width, vals, width, label=scheme)
    ax.set_xticks(xs)
    ax.set_xticklabels([_SPLIT_LABELS[s] for s in splits])
    ax.set_title(title)


def _metrics_figure(summary_path, out_path):
    rows = _read_rows(summary_path)
    have_collisions = all(r["collision_count"] != "" for r in rows)
    panels = [("mean_cost", "mean tracking cost"),
              ("mean_mse", "mean waypoint MSE")]
    if have_collisions:
        panels.insert(0, ("collision_count", "records with collisions"))
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (column, title) in zip(axes, panels):
        _bar_panel(ax, rows, column, title)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _latents_figure(latents_path, out_path):
    rows = _read_rows(latents_path)
    width = sum(1 for c in rows[0] if c.startswith("nu_"))
    values = np.array([[float(r["nu_%d" % i]) for i in range(width)]
                       for r in rows])
    # pick the two most spread-out latent coordinates so constant
    # entries (shared goal coordinates) do not flatten the cloud
    order = np.argsort(-values.var(axis=0), kind="stable")
    i, j = int(order[0]), int(order[1])
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    for split in ("train", "adv_train", "ood"):
        pts = values[[k for k, r in enumerate(rows) if r["split"] == split]]
        if pts.size:
            ax.scatter(pts[:, i], pts[:, j], s=8, alpha=0.5, label=split)
    ax.set_xlabel("nu[%d]" % i)
    ax.set_ylabel("nu[%d]" % j)
    ax.set_title("latent spread by split")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_summary_figures(outdir):
    """Render metric bars and a latent scatter next to the CSVs.

    Returns the list of files written.  Requires summary.csv (and uses
    latents.csv when present) in ``outdir``.
    """
    summary = os.path.join(outdir, "summary.csv")
    if not os.path.exists(summary):
        raise FileNotFoundError("no summary.csv under %r" % (outdir,))
    written = []
    metrics = os.path.join(outdir, METRICS_FILE)
    _metrics_figure(summary, metrics)
    written.append(metrics)
    latents = os.path.join(outdir, "latents.csv")
    if os.path.exists(latents):
        target = os.path.join(outdir, LATENTS_FILE)
        _latents_figure(latents, target)
        written.append(target)
    return written

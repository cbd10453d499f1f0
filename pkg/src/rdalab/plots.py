"""SVG figures for a finished run: accuracy curve, class marginals, confidence histograms."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import UsageError  # noqa: E402

N_BINS = 20


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_accuracy(metrics, path):
    ep = [r.epoch for r in metrics.records]
    acc = [r.accuracy for r in metrics.records]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ep, acc, marker="o" if len(ep) == 1 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.set_title(f"{metrics.method}, seed {metrics.seed}")
    return _save(fig, path)


def plot_marginals(metrics, path):
    """Final pseudo-label marginal next to the true unlabeled marginal."""
    pseudo = np.asarray(metrics.final.marginal)
    true = np.asarray(metrics.true_unlabeled_marginal)
    idx = np.arange(len(true))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(idx - 0.2, true, width=0.4, label="unlabeled (true)")
    ax.bar(idx + 0.2, pseudo, width=0.4, label="pseudo-labels")
    ax.set_xticks(idx)
    ax.set_xlabel("class")
    ax.set_ylabel("fraction")
    ax.set_title(f"TV = {metrics.final.marginal_tv:.3f}")
    ax.legend(fontsize=8)
    return _save(fig, path)


def confidence_histograms(confidences, bins=N_BINS):
    """Counts of max-probability for correct and wrong predictions on shared bin edges."""
    conf = np.asarray(confidences, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    ok = conf[:, 1] > 0.5
    return edges, np.histogram(conf[ok, 0], edges)[0], np.histogram(conf[~ok, 0], edges)[0]


def plot_confidence(confidences, path, title=""):
    edges, right, wrong = confidence_histograms(confidences)
    centers = 0.5 * (edges[1:] + edges[:-1])
    w = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(centers, right, width=w, alpha=0.6, label="correct")
    ax.bar(centers, wrong, width=w, alpha=0.6, label="wrong")
    ax.set_xlabel("max predicted probability")
    ax.set_ylabel("test examples")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def emit_plots(metrics, output_dir):
    """Write accuracy.svg, marginal.svg and (when a final evaluation exists) confidence.svg."""
    if not metrics.records:
        raise UsageError("no epochs recorded; nothing to plot")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_accuracy(metrics, out / "accuracy.svg"), plot_marginals(metrics, out / "marginal.svg")]
    if metrics.final_eval is not None:
        paths.append(plot_confidence(metrics.final_eval.confidences, out / "confidence.svg",
                                     f"{metrics.method}, seed {metrics.seed}"))
    return paths

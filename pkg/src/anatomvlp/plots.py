"""Static figures: ROC curves per entity and activation-density histograms."""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def roc_points(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    thresholds = np.concatenate([[np.inf], np.sort(np.unique(scores))[::-1], [-np.inf]])
    tpr, fpr = [], []
    p = max(int((labels == 1).sum()), 1)
    n = max(int((labels == 0).sum()), 1)
    for t in thresholds:
        pred = scores >= t
        tpr.append(((pred == 1) & (labels == 1)).sum() / p)
        fpr.append(((pred == 1) & (labels == 0)).sum() / n)
    return np.array(fpr), np.array(tpr)


def plot_roc(per_entity, out_path):
    """per_entity: list of (name, scores, labels)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, scores, labels in per_entity:
        fpr, tpr = roc_points(scores, labels)
        ax.plot(fpr, tpr, label=name, lw=1.2)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_activation_density(density_by_variant, anatomy_names, out_path):
    """density_by_variant: {variant: activation_density() output}."""
    M = len(anatomy_names)
    fig, axes = plt.subplots(1, M, figsize=(3 * M, 2.6), squeeze=False)
    for j in range(M):
        ax = axes[0][j]
        for variant, dens in density_by_variant.items():
            d = dens[j]
            centers = 0.5 * (d["edges"][:-1] + d["edges"][1:])
            total = max(d["count"], 1)
            ax.plot(centers, d["histogram"] / total, label=variant, lw=1.0)
        ax.set_title(anatomy_names[j], fontsize=8)
        ax.set_yscale("log")
        if j == 0:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path

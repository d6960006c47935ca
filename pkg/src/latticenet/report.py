"""Figure rendering for training curves and model comparisons.

Figures are written next to the CSV outputs so a run directory is
self-contained: metrics.csv + curves.png, comparison.csv + comparison.png.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def plot_curves(records, out_path, title: str = ""):
    """Accuracy and loss vs epoch for one training run."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    for split, style in (("train", "--"), ("test", "-")):
        rows = [r for r in records if r.split == split]
        epochs = [r.epoch for r in rows]
        ax_acc.plot(epochs, [r.accuracy for r in rows], style, label=split)
        ax_loss.plot(epochs, [r.loss for r in rows], style, label=split)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_model_curves(per_model_records, out_path):
    """Test accuracy and loss across models, one line per model."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    for model, records in per_model_records.items():
        rows = [r for r in records if r.split == "test"]
        epochs = [r.epoch for r in rows]
        ax_acc.plot(epochs, [r.accuracy for r in rows], label=model)
        ax_loss.plot(epochs, [r.loss for r in rows], label=model)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.legend(fontsize=8)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("test loss")
    ax_loss.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_comparison(rows, out_path):
    """Bar chart of final accuracies; rows = [(model, loss, accuracy), ...]."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r[0] for r in rows]
    accs = [r[2] for r in rows]
    ax.bar(names, accs, color="steelblue")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    for i, a in enumerate(accs):
        ax.text(i, a + 0.01, f"{a:.3f}", ha="center", fontsize=8)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

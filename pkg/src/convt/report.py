"""Static figure rendering for training runs, evaluations, and ablations.

Everything here reads delimited output (metrics CSV, ablation CSV) and writes
PNG files next to it; no interactive backends.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import read_metrics_csv

__all__ = [
    "render_training_curves",
    "render_ablation",
    "write_ablation_csv",
    "read_ablation_csv",
    "ABLATION_HEADER",
]

ABLATION_HEADER = [
    "variant",
    "final_train_accuracy",
    "final_ce_loss",
    "final_triplet_loss",
    "eval_mean",
    "eval_std_err",
    "repeats",
]


def render_training_curves(metrics, out_dir) -> list[Path]:
    """Loss and accuracy curves from per-epoch records (or a metrics CSV path).

    Epochs where the augmentation gate fired are shaded on the accuracy plot.
    Returns the written file paths.
    """
    if isinstance(metrics, (str, Path)):
        records = read_metrics_csv(metrics)
    else:
        records = list(metrics)
    if not records:
        raise ValueError("no metrics records to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    epochs = [r.epoch for r in records]
    written = []

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [r.total_loss for r in records], label="total", lw=1.4)
    ax.plot(epochs, [r.ce_loss for r in records], label="cross-entropy", lw=1.0)
    ax.plot(epochs, [r.triplet_loss for r in records], label="triplet", lw=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [r.train_accuracy for r in records], color="tab:green", lw=1.4)
    gated = [r.epoch for r in records if r.aug_gate]
    for e in gated:
        ax.axvspan(e - 0.5, e + 0.5, color="tab:blue", alpha=0.08, lw=0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("train accuracy (shaded: augmented epochs)")
    fig.tight_layout()
    path = out_dir / "accuracy_curve.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def write_ablation_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in ABLATION_HEADER})
    return path


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_ablation(rows: list[dict], out_path) -> Path:
    """Bar chart of query accuracy per variant, with standard-error bars."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    names = [str(r["variant"]) for r in rows]
    means = [float(r["eval_mean"]) for r in rows]
    errs = [float(r["eval_std_err"]) for r in rows]
    train_accs = [float(r["final_train_accuracy"]) for r in rows]

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    x = range(len(names))
    ax.bar(x, means, yerr=errs, capsize=4, color="tab:blue", alpha=0.85, label="query accuracy")
    ax.plot(x, train_accs, "o--", color="tab:orange", label="final train accuracy")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title("loss/augmentation comparison")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path

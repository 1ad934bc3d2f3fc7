"""Report figures written next to the CSV/JSONL outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _series(records, key):
    pts = [(r["step"], r[key]) for r in records if r.get(key) is not None]
    if not pts:
        return np.array([]), np.array([])
    steps, vals = zip(*pts)
    return np.array(steps), np.array(vals, dtype=float)


def plot_training_curves(records, path, title=None):
    """Losses on the left, accuracies and mask rates on the right."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
        for key in ("L_x", "L_u", "L_c"):
            x, y = _series(records, key)
            if len(x):
                ax_loss.plot(x, y, marker=".", label=key)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss (window mean)")
        ax_loss.legend()
        for key, label in (("top1", "test top-1 (EMA)"), ("raw_top1", "test top-1 (raw)"),
                           ("pseudo_label_accuracy", "pseudo-label acc."),
                           ("ood_mask_rate", "OOD mask rate")):
            x, y = _series(records, key)
            if len(x):
                ax_acc.plot(x, y, marker=".", label=label)
        ax_acc.set_xlabel("step")
        ax_acc.set_ylim(-0.02, 1.02)
        ax_acc.legend(loc="lower right")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def plot_confusion(counts, path, class_names=None):
    counts = np.asarray(counts)
    c = len(counts)
    names = class_names or [str(i) for i in range(c)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.45 * c + 2, 0.45 * c + 1.6))
        im = ax.imshow(counts, cmap="Blues")
        ax.set_xticks(range(c), names)
        ax.set_yticks(range(c), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        thresh = counts.max() / 2 if counts.size else 0
        for i in range(c):
            for j in range(c):
                ax.text(j, i, str(counts[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if counts[i, j] > thresh else "black")
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def plot_ablation(rows, path, metric="top1"):
    """Bar chart of per-cell mean with std error bars."""
    names = [r["cell"] for r in rows]
    means = [r.get(f"{metric}_mean") or 0.0 for r in rows]
    stds = [r.get(f"{metric}_std") or 0.0 for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.2))
        ax.bar(range(len(rows)), means, yerr=stds, capsize=3, color="tab:blue", alpha=0.8)
        ax.set_xticks(range(len(rows)), names, rotation=20, ha="right")
        ax.set_ylabel(f"{metric} (mean over seeds)")
        lo = min(means) - max(stds + [0.0]) if means else 0.0
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)

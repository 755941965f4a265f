"""Report figures: score tracks, threshold sweeps and training curves.

Every function writes one image file (format from the suffix) and closes
its figure.  The Agg backend is forced so the CLI works headless.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (8, 3.2)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_scores(path, raw, predicted=(), gold=(), hop_samples=160, sample_rate=16000,
                delta=None):
    """Score curve over time with predicted boundaries (solid) and gold
    boundaries (red dashed)."""
    scores = np.asarray(raw.scores)
    t = (np.arange(len(scores)) + 1) * hop_samples / sample_rate
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(t, scores, color="k", lw=1, label="score")
    for i, b in enumerate(predicted):
        ax.axvline(b, color="tab:blue", lw=1, alpha=0.7, label="predicted" if i == 0 else None)
    for i, b in enumerate(gold):
        ax.axvline(b, color="tab:red", ls="--", lw=1, label="gold" if i == 0 else None)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("-cos(z_i, z_i+1)")
    if delta is not None:
        ax.set_title(f"delta = {delta:g}")
    ax.legend(loc="upper right", fontsize=8)
    _save(fig, path)


def plot_tuning(path, table, best_delta=None):
    """Precision, recall, F1 and R-value against the peak threshold."""
    deltas = [d for d, _ in table]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, attr in (("P", "precision"), ("R", "recall"), ("F1", "f1"), ("R-value", "r_value")):
        ax.plot(deltas, [100 * getattr(rep, attr) for _, rep in table], marker=".", label=label)
    if best_delta is not None:
        ax.axvline(best_delta, color="grey", ls=":", lw=1)
    ax.set_xlabel("prominence threshold")
    ax.set_ylabel("%")
    ax.set_ylim(0, 102)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_history(path, history):
    epochs = np.arange(1, len(history.train_loss) + 1)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(epochs, history.train_loss, marker=".", label="train")
    ax.plot(epochs, history.val_loss, marker=".", label="validation")
    if history.best_epoch:
        ax.axvline(history.best_epoch, color="grey", ls=":", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("NCE loss")
    ax.legend(fontsize=8)
    _save(fig, path)

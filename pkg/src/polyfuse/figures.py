"""Figure rendering for the report path.

Every function writes a PNG next to the delimited output and returns the
path. The Agg backend keeps rendering headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .training import RunHistory  # noqa: E402


def render_history_curves(history: RunHistory, out_png, title: str | None = None) -> Path:
    """Train and validation loss per epoch, best epoch marked."""
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    epochs = range(history.num_epochs)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(epochs, history.train_loss, label="train loss", color="tab:blue")
    ax.plot(epochs, history.val_loss, label="val loss", color="tab:orange")
    if 0 <= history.best_epoch < history.num_epochs:
        ax.axvline(history.best_epoch, color="gray", linestyle=":",
                   label=f"best epoch {history.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_trials_overview(rows: list[dict], out_png) -> Path:
    """Accuracy against parameter count for every scored trial row.

    rows are trials-CSV dicts; rows without metrics are skipped.
    """
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    points = []
    for row in rows:
        acc = row.get("accuracy", "")
        params = row.get("params", "")
        if acc and params:
            points.append((row.get("tag", "?"), int(params), float(acc)))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if points:
        xs = [p[1] for p in points]
        ys = [p[2] for p in points]
        ax.scatter(xs, ys, color="tab:blue", zorder=3)
        for tag, x, y in points:
            ax.annotate(tag, (x, y), textcoords="offset points", xytext=(4, 4),
                        fontsize=7)
        if max(xs) > 10 * min(xs):
            ax.set_xscale("log")
    ax.set_xlabel("trainable parameters")
    ax.set_ylabel("accuracy")
    ax.set_title("accuracy vs. model size")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out

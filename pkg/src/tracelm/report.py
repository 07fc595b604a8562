"""Figure rendering for training traces, perplexity summaries, and entropy
profiles. All figures go straight to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .eval import EntropyReport
from .trainer import TrainResult
from .vocab import FIELD_ORDER


def save_loss_curve(result: TrainResult, path: str | Path, alpha: float = 0.01) -> None:
    """Raw per-step loss (faint) with its EWMA smoothing (bold)."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(result.steps, result.raw_loss, color="tab:blue", alpha=0.25, lw=0.8, label="raw")
    ax.plot(
        result.steps,
        result.ewma_loss,
        color="tab:blue",
        lw=1.8,
        label=f"ewma (alpha={alpha:g})",
    )
    if result.val_loss:
        per_epoch = max(1, len(result.steps) // max(1, len(result.val_loss)))
        epoch_steps = [min(per_epoch * (i + 1), result.steps[-1]) for i in range(len(result.val_loss))]
        ax.plot(epoch_steps, result.val_loss, "o--", color="tab:orange", lw=1.2, label="val")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss (nats)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)


def save_perplexity_bars(perplexity: dict[str, float], path: str | Path) -> None:
    """One bar per field, log scale (fields differ by orders of magnitude)."""
    fields = [name for name in FIELD_ORDER if name in perplexity]
    values = [perplexity[name] for name in fields]
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    bars = ax.bar(fields, values, color=["tab:blue", "tab:orange", "tab:green"][: len(fields)])
    ax.set_yscale("log")
    ax.set_ylabel("perplexity")
    ax.grid(axis="y", alpha=0.3)
    for bar, value in zip(bars, values):
        ax.annotate(
            f"{value:.3f}",
            (bar.get_x() + bar.get_width() / 2, value),
            ha="center",
            va="bottom",
            fontsize=8,
        )
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)


def save_entropy_profile(
    report: EntropyReport, path: str | Path, max_sessions: int = 6
) -> None:
    """Per-row entropy versus row index for the first few scored sessions."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for session in report.sessions[:max_sessions]:
        xs: list[int] = []
        ys: list[float] = []
        for index, row in enumerate(session.rows):
            if row.entropy is not None:
                xs.append(index)
                ys.append(row.entropy)
        if xs:
            ax.plot(xs, ys, marker="o", ms=3, lw=1.0, label=session.session_id)
    ax.set_xlabel("row index")
    ax.set_ylabel("row entropy (nats)")
    ax.grid(alpha=0.3)
    if report.sessions[:max_sessions]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)


def save_accuracy_bars(values: dict[str, float], path: str | Path, title: str) -> None:
    """Grouped metric bars in [0, 1] for accuracy or ROUGE summaries."""
    labels = list(values)
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.bar(labels, [values[k] for k in labels], color="tab:purple")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)

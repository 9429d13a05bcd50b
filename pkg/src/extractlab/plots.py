"""Optional matplotlib figures for stored reports.

CSV and JSON stay the primary outputs; these are conveniences and need the
``plots`` extra installed. Everything renders with the non-interactive Agg
backend.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence


def _pyplot():
    try:
        import matplotlib
    except ImportError as e:  # pragma: no cover - depends on the environment
        raise RuntimeError("figures need matplotlib; install the 'plots' extra") from e
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # a fixed Software entry keeps the PNG independent of the matplotlib version string
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    fig.clf()
    return path


def agreement_curves(curves: Mapping[str, Sequence[float]], path, title: str = "") -> Path:
    """One line per label; x is the iteration index (0 = seed-only substitute)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in curves.items():
        ax.plot(range(len(ys)), [100 * y for y in ys], marker="o", ms=3, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("agreement on secret test set (%)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    out = _save(fig, path)
    plt.close(fig)
    return out


def sweep_table(means: Mapping[str, Mapping[int, float]], path, title: str = "") -> Path:
    """Mean final agreement against budget, one line per strategy."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for strategy, row in means.items():
        budgets = sorted(row)
        ax.plot(budgets, [100 * row[b] for b in budgets], marker="s", label=strategy)
    ax.set_xlabel("query budget")
    ax.set_ylabel("mean final agreement (%)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    out = _save(fig, path)
    plt.close(fig)
    return out


def label_histogram(counts: Sequence[int], path, title: str = "") -> Path:
    """Bar chart of how often the oracle returned each class."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    total = max(sum(counts), 1)
    ax.bar(range(len(counts)), [c / total for c in counts], color="tab:gray")
    ax.set_xticks(range(len(counts)))
    ax.set_xlabel("class returned by the oracle")
    ax.set_ylabel("fraction of queries")
    if title:
        ax.set_title(title)
    out = _save(fig, path)
    plt.close(fig)
    return out

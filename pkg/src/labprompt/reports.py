"""Study reports: delimited output, a plain-text table, and rendered figures."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_rows_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("no rows to report")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def format_table(rows: list[dict]) -> str:
    cols = list(rows[0])
    rendered = [
        [f"{v:.4f}" if isinstance(v, float) and not math.isnan(v) else str(v) for v in row.values()]
        for row in rows
    ]
    widths = [max(len(c), *(len(r[i]) for r in rendered)) for i, c in enumerate(cols)]
    header = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    sep = "  ".join("-" * w for w in widths)
    body = "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rendered)
    return f"{header}\n{sep}\n{body}\n"


def _grouped_means(rows: list[dict], group_key: str, value_key: str) -> tuple[list, list]:
    groups: dict = {}
    for row in rows:
        v = row[value_key]
        if isinstance(v, float) and math.isnan(v):
            continue
        groups.setdefault(row[group_key], []).append(v)
    keys = list(groups)
    return keys, [sum(vs) / len(vs) for vs in groups.values()]


def render_ablation_figure(rows: list[dict], path: str | Path) -> None:
    """Mean micro/macro F1 per arm, plus the retrieval probe where defined."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    arms, micro = _grouped_means(rows, "arm", "micro_f1")
    _, macro = _grouped_means(rows, "arm", "macro_f1")
    x = range(len(arms))
    axes[0].bar([i - 0.2 for i in x], micro, width=0.4, label="micro F1")
    axes[0].bar([i + 0.2 for i in x], macro, width=0.4, label="macro F1")
    axes[0].set_xticks(list(x), arms, rotation=30, ha="right")
    axes[0].set_ylabel("F1")
    axes[0].set_title("Downstream diagnosis by arm")
    axes[0].legend()
    r_arms, recalls = _grouped_means(rows, "arm", "recall_at_1")
    axes[1].bar(range(len(r_arms)), recalls, color="tab:green")
    axes[1].set_xticks(range(len(r_arms)), r_arms, rotation=30, ha="right")
    axes[1].set_ylabel("recall@1")
    axes[1].set_title("Text-to-series retrieval by arm")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep_figure(rows: list[dict], axis: str, path: str | Path) -> None:
    keys, micro = _grouped_means(rows, axis, "micro_f1")
    _, macro = _grouped_means(rows, axis, "macro_f1")
    fig, ax = plt.subplots(figsize=(6, 4))
    x = range(len(keys))
    ax.bar([i - 0.2 for i in x], micro, width=0.4, label="micro F1")
    ax.bar([i + 0.2 for i in x], macro, width=0.4, label="macro F1")
    ax.set_xticks(list(x), [str(k) for k in keys])
    ax.set_xlabel(axis)
    ax.set_ylabel("F1")
    ax.set_title(f"Sensitivity over {axis}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curve(metrics: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [m["step"] for m in metrics]
    for key in ("contrast", "match", "gen", "total"):
        ax.plot(steps, [m[key] for m in metrics], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

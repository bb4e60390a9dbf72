"""Figure rendering for training logs, evaluation reports, and mask averages.

Every entry point takes already-computed data and writes PNG files next to
the delimited/JSON output it illustrates; nothing here recomputes metrics.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import LOG_HEADER


def parse_loss_log(path) -> dict[str, np.ndarray]:
    """Read a tab-separated loss log into {column_name: values} arrays."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        raise ValueError(f"empty loss log {path}")
    header = lines[0].split("\t")
    if header != LOG_HEADER.split("\t"):
        raise ValueError(f"unexpected loss log header {header!r}")
    rows = [ln.split("\t") for ln in lines[1:]]
    if not rows:
        raise ValueError(f"loss log {path} has a header but no steps")
    data = np.array([[float(v) for v in row] for row in rows])
    return {name: data[:, j] for j, name in enumerate(header)}


def save_loss_curves(log_path, out_path) -> str:
    """Render one panel per loss column (plus the totals) from a loss log."""
    cols = parse_loss_log(log_path)
    step = cols.pop("step")
    names = list(cols)
    fig, axes = plt.subplots(2, 4, figsize=(16, 7), sharex=True)
    for ax, name in zip(axes.ravel(), names):
        ax.plot(step, cols[name], lw=0.9)
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    for ax in axes.ravel()[len(names):]:
        ax.axis("off")
    fig.suptitle("training losses (batch means)")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return str(out_path)


def save_eval_figures(report: dict, out_dir) -> list[str]:
    """Bar chart of scalar metrics, plus a per-pair scatter when available."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    rows = [(r["name"], r["value"]) for r in report["metrics"] if r["value"] is not None]
    fig, ax = plt.subplots(figsize=(10, 4.5))
    names = [n for n, _ in rows]
    values = [v for _, v in rows]
    ax.bar(range(len(rows)), values, color="#4878cf")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=40, ha="right", fontsize=8)
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_title(f"evaluation metrics over {report['n_pairs']} pair(s)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    path = out_dir / "metrics.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(str(path))

    per_pair = report.get("per_pair", [])
    if len(per_pair) >= 2:
        keys = list(per_pair[0])
        fig, axes = plt.subplots(2, (len(keys) + 1) // 2, figsize=(3.2 * ((len(keys) + 1) // 2), 6))
        for ax, key in zip(np.ravel(axes), keys):
            ax.plot([p[key] for p in per_pair], "o-", ms=3)
            ax.set_title(key, fontsize=9)
            ax.set_xlabel("pair")
            ax.grid(alpha=0.3)
        for ax in np.ravel(axes)[len(keys):]:
            ax.axis("off")
        fig.tight_layout()
        path = out_dir / "per_pair.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(str(path))

    grid = report.get("ablation_grid")
    if grid:
        metric_names = [r["name"] for r in grid["full"] if r["value"] is not None]
        labels = list(grid)
        x = np.arange(len(metric_names))
        width = 0.8 / len(labels)
        fig, ax = plt.subplots(figsize=(11, 4.5))
        for j, label in enumerate(labels):
            vals = {r["name"]: r["value"] for r in grid[label]}
            ax.bar(
                x + (j - (len(labels) - 1) / 2) * width,
                [vals.get(n) if vals.get(n) is not None else np.nan for n in metric_names],
                width,
                label=label,
            )
        ax.set_xticks(x)
        ax.set_xticklabels(metric_names, rotation=40, ha="right", fontsize=8)
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.legend(fontsize=8)
        ax.set_title("inference-time ablation grid")
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        path = out_dir / "ablation_grid.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(str(path))
    return written


def save_canonical_figure(viz: dict, out_path) -> str:
    """Side-by-side averaged part masks: translation-aligned vs canonical."""
    part_names = ("face", "eyes", "mouth")
    aligned = viz["aligned_mean"]
    canon = viz["canonical_mean"]
    fig, axes = plt.subplots(2, 3, figsize=(9, 6.2))
    for j, name in enumerate(part_names):
        axes[0, j].imshow(aligned[j], cmap="magma", vmin=0.0)
        axes[0, j].set_title(f"{name} (aligned original)", fontsize=9)
        axes[1, j].imshow(canon[j], cmap="magma", vmin=0.0)
        axes[1, j].set_title(f"{name} (canonical)", fontsize=9)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(
        "averaged part masks over {n} frames — variance {va:.3g} (aligned) vs {vc:.3g} (canonical)".format(
            n=viz["n_frames"], va=viz["aligned_variance"], vc=viz["canonical_variance"]
        ),
        fontsize=10,
    )
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return str(out_path)

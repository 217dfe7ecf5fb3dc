"""Figure rendering for CLI reports.

Every renderer takes an already-computed report dict and an output
directory, draws with the Agg backend, and returns the written file
names. Core numerics never import this module, so headless use and
testing stay free of any plotting dependency beyond this file.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

_DOM_COLORS = {"source": "#4878d0", "target": "#ee854a"}


def _save(fig, out_dir: Path, name: str) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_dir / name, dpi=120)
    plt.close(fig)
    return name


def render_stats_figures(report: dict, out_dir) -> list[str]:
    """Class-frequency comparison and per-class box geometry."""
    out_dir = Path(out_dir)
    written = []
    classes = report["classes"]
    k = len(classes)
    x = np.arange(k)

    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * k + 2), 3.4))
    width = 0.38
    for off, dom in ((-width / 2, "source"), (width / 2, "target")):
        freqs = report["domains"][dom]["class_freqs"]
        ax.bar(x + off, freqs, width, label=dom, color=_DOM_COLORS[dom])
    ax.set_xticks(x, classes)
    ax.set_ylabel("class frequency")
    ax.set_title("Class frequency by domain")
    ax.legend(frameon=False)
    fig.tight_layout()
    written.append(_save(fig, out_dir, "class_frequencies.png"))

    fig, axes = plt.subplots(1, 2, figsize=(8.2, 3.6))
    for ax, key, label in ((axes[0], "size_mean", "box size (w, h)"), (axes[1], "loc_mean", "box center (cx, cy)")):
        for dom in ("source", "target"):
            per_class = report["domains"][dom]["per_class"]
            xs = [entry[key][0] for entry in per_class]
            ys = [entry[key][1] for entry in per_class]
            ax.scatter(xs, ys, label=dom, color=_DOM_COLORS[dom])
            for entry, px, py in zip(per_class, xs, ys):
                ax.annotate(entry["class"], (px, py), fontsize=7, xytext=(2, 2), textcoords="offset points")
        ax.set_title(label)
        ax.set_xlabel("mean (x)")
        ax.set_ylabel("mean (y)")
    axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    written.append(_save(fig, out_dir, "box_geometry.png"))
    return written


def render_weights_figures(rows: list, out_dir) -> list[str]:
    """Histogram of combined weights plus per-class spread of the box factor."""
    out_dir = Path(out_dir)
    combined = np.array([r["combined"] for r in rows], dtype=float)
    v_box = np.array([r["v_box"] for r in rows], dtype=float)
    labels = [r["class"] for r in rows]

    fig, axes = plt.subplots(1, 2, figsize=(8.2, 3.4))
    axes[0].hist(combined, bins=30, color="#4878d0")
    axes[0].set_xlabel("combined weight")
    axes[0].set_ylabel("annotations")
    axes[0].set_title("Combined weight distribution")

    classes = sorted(set(labels))
    data = [v_box[np.array([l == c for l in labels])] for c in classes]
    axes[1].boxplot(data, tick_labels=classes)
    axes[1].set_ylabel("box-ratio factor")
    axes[1].set_title("Box factor per class")
    fig.tight_layout()
    return [_save(fig, out_dir, "weight_distributions.png")]


def render_train_figures(report: dict, out_dir) -> list[str]:
    """Loss-term curves over steps and final per-class accuracy."""
    out_dir = Path(out_dir)
    written = []
    history = report.get("loss_history", [])
    if history:
        steps = [h["step"] for h in history]
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for key, color in (
            ("total", "#333333"),
            ("source_det", "#4878d0"),
            ("target_det", "#ee854a"),
            ("alignment", "#6acc64"),
        ):
            ax.plot(steps, [h[key] for h in history], label=key, color=color, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("loss term")
        ax.set_title("Objective terms during training")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        written.append(_save(fig, out_dir, "training_losses.png"))

    per_class = report["metrics"]["per_class_accuracy"]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.0 * len(per_class) + 2), 3.2))
    names = list(per_class)
    ax.bar(names, [per_class[n] for n in names], color="#4878d0")
    ax.axhline(report["metrics"]["balanced_accuracy"], color="#333333", linestyle="--",
               linewidth=1.0, label="balanced")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("accuracy")
    ax.set_title("Held-out target accuracy by class")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    written.append(_save(fig, out_dir, "per_class_accuracy.png"))
    return written


def render_bench_figures(result: dict, out_dir) -> list[str]:
    """Median balanced accuracy per ablation row with min/max whiskers."""
    out_dir = Path(out_dir)
    rows = result["rows"]
    labels = [r["label"] for r in rows]
    med = np.array([r["summary"]["balanced_accuracy"]["median"] for r in rows])
    lo = med - np.array([r["summary"]["balanced_accuracy"]["min"] for r in rows])
    hi = np.array([r["summary"]["balanced_accuracy"]["max"] for r in rows]) - med

    fig, ax = plt.subplots(figsize=(7.2, 3.8))
    x = np.arange(len(rows))
    ax.bar(x, med, yerr=[lo, hi], capsize=3, color="#4878d0")
    ax.set_xticks(x, labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("balanced accuracy (median)")
    ax.set_title("Ablation grid: balanced accuracy across seeds")
    fig.tight_layout()
    return [_save(fig, out_dir, "bench_balanced_accuracy.png")]


def render_verify_figures(report: dict, out_dir) -> list[str]:
    """Identity discrepancies vs the exactness threshold, log scale."""
    out_dir = Path(out_dir)
    names = ["max_discrepancy", "mean_discrepancy", "max_forced_discrepancy", "smoothed_gap_mean"]
    values = [max(report[n], 1e-18) for n in names]

    fig, ax = plt.subplots(figsize=(6.2, 3.4))
    ax.bar(names, values, color=["#4878d0", "#4878d0", "#4878d0", "#ee854a"])
    ax.set_yscale("log")
    ax.axhline(1e-8, color="#d65f5f", linestyle="--", linewidth=1.0, label="failure threshold")
    ax.set_ylabel("absolute gap")
    ax.set_title("Reweighting identity: exact vs smoothed")
    ax.tick_params(axis="x", labelsize=7)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return [_save(fig, out_dir, "verify_discrepancies.png")]

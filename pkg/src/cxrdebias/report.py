"""Figure and table rendering. Every plot gets a companion CSV holding
exactly the plotted values; plots are derived artifacts, never the source
of truth.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .ablation import ExternalTestResult
from .ingest import DatasetManifest
from .pruning import PruneLog, stable_threshold


def _companion_csv_path(out_path) -> Path:
    out = Path(out_path)
    return out.with_suffix(".csv")


def render_auc_curve(log: PruneLog, target: float, out_path) -> Path:
    """Mean +/- std AUC versus pruned count, with the target line and a
    marker at the stable-threshold index. Returns the figure path; the
    companion CSV lands next to it."""
    if not log.rounds:
        raise ValueError("prune log has no rounds to plot")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    xs = [r.round_index for r in log.rounds]
    means = [r.auc_mean for r in log.rounds]
    stds = [r.auc_std for r in log.rounds]

    with open(_companion_csv_path(out), "w", newline="") as fh:
        writer = csv.writer(fh)
        k = len(log.rounds[0].fold_aucs)
        writer.writerow(
            ["pruned_count", "pruned_id", "auc_mean", "auc_std"]
            + [f"auc_f{i}" for i in range(k)]
        )
        for r in log.rounds:
            writer.writerow(
                [r.round_index, r.pruned_id or "", f"{r.auc_mean:.6f}", f"{r.auc_std:.6f}"]
                + [f"{a:.6f}" for a in r.fold_aucs]
            )

    stable = stable_threshold(means, target)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.errorbar(xs, means, yerr=stds, fmt="o-", capsize=3, label="mean AUC over folds")
    ax.axhline(target, color="tab:red", linestyle="--", label=f"target {target:.0%}")
    if stable is not None:
        ax.axvline(xs[stable], color="tab:green", linestyle=":",
                   label=f"stable from {xs[stable]} pruned")
        ax.plot([xs[stable]], [means[stable]], "s", color="tab:green", markersize=9)
    ax.set_xlabel("pruned nodule images")
    ax.set_ylabel("validation AUC")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_scatter(result: ExternalTestResult, out_path) -> Path:
    """Per-image nodule probability scatter with the 0.5 decision line."""
    if not result.per_image:
        raise ValueError("external result has no included images to plot")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)

    with open(_companion_csv_path(out), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "id", "probability"])
        for i, (rec_id, prob) in enumerate(result.per_image):
            writer.writerow([i, rec_id, f"{prob:.6f}"])

    xs = range(len(result.per_image))
    ys = [p for _, p in result.per_image]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.scatter(xs, ys, s=14)
    ax.axhline(0.5, color="tab:red", linestyle="--")
    ax.set_xlabel("image index")
    ax.set_ylabel("nodule probability")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"accuracy {result.accuracy:.2%} over {len(result.per_image)} images")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def report_pruned_records(
    log: PruneLog, manifest: DatasetManifest, top_n: int, out_path
) -> Path:
    """Table of the first top_n pruned ids joined with manifest metadata."""
    if top_n > len(log.prune_list):
        raise ValueError(
            f"top_n={top_n} exceeds prune list length {len(log.prune_list)}"
        )
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["rank", "id", "label", "subtlety", "nodule_x", "nodule_y", "nodule_size_mm"]
        )
        for rank, rec_id in enumerate(log.prune_list[:top_n], start=1):
            rec = manifest.by_id(rec_id)
            cx = "" if rec.nodule_center is None else f"{rec.nodule_center[0]:g}"
            cy = "" if rec.nodule_center is None else f"{rec.nodule_center[1]:g}"
            writer.writerow(
                [
                    rank,
                    rec.id,
                    rec.label,
                    rec.subtlety or "",
                    cx,
                    cy,
                    "" if rec.nodule_size_mm is None else f"{rec.nodule_size_mm:g}",
                ]
            )
    return out

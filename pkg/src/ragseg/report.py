"""Report emission: comparison tables across runs, summary plots, and the
retrieval inspection panel."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport, case_analysis


def collect_reports(run_dir) -> dict[str, EvalReport]:
    """All eval_*.json reports in a run directory, keyed by file stem."""
    run_dir = Path(run_dir)
    reports = {}
    for path in sorted(run_dir.glob("eval_*.json")):
        reports[path.stem] = EvalReport.from_json(path)
    return reports


def write_aggregate_table(runs: dict[str, dict[str, EvalReport]], path) -> None:
    """One row per (run, report) with the aggregate Dice/HD statistics."""
    rows = []
    class_ids: list[int] = []
    for run_name in sorted(runs):
        for rep_name in sorted(runs[run_name]):
            rep = runs[run_name][rep_name]
            agg = rep.aggregate
            if not class_ids:
                class_ids = sorted(int(c) for c in agg["per_class_dice_mean"])
            row = {
                "run": run_name,
                "report": rep_name,
                "topk": rep.meta.get("topk"),
                "dice_mean": agg["dice_mean"],
                "dice_std": agg["dice_std"],
                "hd_mean": agg["hd_mean"],
                "hd_std": agg["hd_std"],
            }
            for c in class_ids:
                row[f"dice_{c}"] = agg["per_class_dice_mean"][c]
            rows.append(row)
    if not rows:
        raise ValueError("no reports found in the given run directories")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cross_run_comparison(reference: EvalReport, candidate: EvalReport) -> dict:
    """Improvement/degradation of a candidate run over a reference run."""
    return case_analysis(candidate.cases, reference.cases)


def write_comparison_csv(comparison: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "dice_delta"])
        for cid, delta in comparison["deltas"]:
            writer.writerow([cid, repr(delta)])


def _save_all(fig, base: Path, formats) -> list[Path]:
    written = []
    for fmt in formats:
        out = base.with_suffix(f".{fmt}")
        fig.savefig(out, bbox_inches="tight", dpi=120)
        written.append(out)
    plt.close(fig)
    return written


def plot_dice_vs_k(runs: dict[str, dict[str, EvalReport]], out_base, formats) -> list[Path]:
    """Mean Dice as a function of the number of retrieved guides, per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for run_name in sorted(runs):
        pts = []
        for rep in runs[run_name].values():
            k = rep.meta.get("topk")
            if isinstance(k, int):
                pts.append((k, rep.aggregate["dice_mean"]))
        pts.sort()
        if len(pts) >= 2:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=run_name)
            plotted = True
    if not plotted:
        plt.close(fig)
        return []
    ax.set_xlabel("retrieved guides k (0 = baseline)")
    ax.set_ylabel("mean Dice")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save_all(fig, Path(out_base), formats)


def plot_per_class_dice(runs: dict[str, dict[str, EvalReport]], out_base, formats) -> list[Path]:
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = sorted(runs)
    class_ids = None
    width = 0.8 / max(1, len(labels))
    for i, run_name in enumerate(labels):
        reps = runs[run_name]
        name = sorted(reps)[0]
        agg = reps[name].aggregate
        per_class = {int(k): v for k, v in agg["per_class_dice_mean"].items()}
        if class_ids is None:
            class_ids = sorted(per_class)
        xs = np.arange(len(class_ids)) + i * width
        ax.bar(xs, [per_class[c] for c in class_ids], width=width,
               label=f"{run_name}/{name}")
    ax.set_xticks(np.arange(len(class_ids)) + 0.4 - width / 2)
    ax.set_xticklabels([f"class {c}" for c in class_ids])
    ax.set_ylabel("mean Dice")
    ax.legend(fontsize=7)
    return _save_all(fig, Path(out_base), formats)


def plot_improvement_counts(comparisons: dict[str, dict], out_base, formats) -> list[Path]:
    if not comparisons:
        return []
    fig, ax = plt.subplots(figsize=(6, 4))
    names = sorted(comparisons)
    improved = [comparisons[n]["improved"] for n in names]
    degraded = [comparisons[n]["degraded"] for n in names]
    unchanged = [comparisons[n]["unchanged"] for n in names]
    xs = np.arange(len(names))
    ax.bar(xs - 0.25, improved, width=0.25, label="improved", color="tab:green")
    ax.bar(xs, degraded, width=0.25, label="degraded", color="tab:red")
    ax.bar(xs + 0.25, unchanged, width=0.25, label="unchanged", color="tab:gray")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel("cases")
    ax.legend()
    return _save_all(fig, Path(out_base), formats)


def retrieval_panel(query_image: np.ndarray, query_title: str,
                    guides: list[tuple[np.ndarray, np.ndarray, str]], out_path) -> Path:
    """Side-by-side panel: the query slice, then each retrieved guide with its
    mask contour and similarity in the title."""
    n = 1 + len(guides)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6))
    axes = np.atleast_1d(axes)
    axes[0].imshow(query_image, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title(query_title, fontsize=8, fontweight="bold")
    for ax, (img, mask, title) in zip(axes[1:], guides):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        if mask.max() > 0:
            ax.contour(mask, levels=np.arange(0.5, mask.max() + 0.5), linewidths=0.7)
        ax.set_title(title, fontsize=8)
    for ax in axes:
        ax.axis("off")
    out_path = Path(out_path)
    fig.savefig(out_path, bbox_inches="tight", dpi=120)
    plt.close(fig)
    return out_path

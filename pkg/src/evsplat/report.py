"""Report rendering: CSV tables plus matplotlib figures written next to the
JSON output of the eval/train/inspect paths."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _finite(x: float, cap: float = 99.0) -> float:
    return min(x, cap) if math.isfinite(x) else cap


def write_metrics_report(out_dir, result: dict) -> dict[str, Path]:
    """Per-view metrics as JSON + CSV + bar chart; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "metrics.json", "csv": out / "metrics.csv",
             "figure": out / "metrics.png"}

    with open(paths["json"], "w") as f:
        json.dump(result, f, indent=1)

    with open(paths["csv"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["view", "psnr_db", "ssim"])
        for row in result["views"]:
            writer.writerow([row["view"], repr(row["psnr"]), repr(row["ssim"])])
        writer.writerow(["mean", repr(result["mean_psnr"]),
                         repr(result["mean_ssim"])])

    views = [r["view"] for r in result["views"]]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].bar(views, [_finite(r["psnr"]) for r in result["views"]],
                color="#4878b0")
    axes[0].axhline(_finite(result["mean_psnr"]), color="k", ls="--", lw=1)
    axes[0].set_xlabel("eval view")
    axes[0].set_ylabel("PSNR [dB]")
    axes[1].bar(views, [r["ssim"] for r in result["views"]], color="#b04848")
    axes[1].axhline(result["mean_ssim"], color="k", ls="--", lw=1)
    axes[1].set_xlabel("eval view")
    axes[1].set_ylabel("SSIM")
    fig.tight_layout()
    fig.savefig(paths["figure"], dpi=120)
    plt.close(fig)
    return paths


def write_loss_curves(out_dir, log: list[dict]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "loss_curves.png"
    if not log:
        return path
    iters = [e["iter"] for e in log]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, color in (("total", "k"), ("blur", "#4878b0"),
                       ("event", "#b04848"), ("edi", "#48b070")):
        ax.plot(iters, [e[key] for e in log], color=color, lw=0.8, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def load_training_log(path) -> list[dict]:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def write_inspect_report(out_dir, stats: list[dict]) -> dict[str, Path]:
    """Dataset statistics table (CSV) plus a summary figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "dataset_stats.csv",
             "figure": out / "dataset_stats.png"}
    fields = ["view", "events", "pos_events", "neg_events", "blur_l1",
              "traj_rot_deg", "traj_trans"]
    with open(paths["csv"], "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in stats:
            writer.writerow({k: row[k] for k in fields})

    views = [r["view"] for r in stats]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    axes[0].bar(views, [r["events"] for r in stats], color="#4878b0")
    axes[0].set_xlabel("view")
    axes[0].set_ylabel("event count")
    axes[1].bar(views, [r["blur_l1"] for r in stats], color="#b04848")
    axes[1].set_xlabel("view")
    axes[1].set_ylabel("blur magnitude (L1 vs sharp)")
    axes[2].bar(views, [r["traj_rot_deg"] for r in stats], color="#48b070")
    axes[2].set_xlabel("view")
    axes[2].set_ylabel("trajectory rotation [deg]")
    fig.tight_layout()
    fig.savefig(paths["figure"], dpi=120)
    plt.close(fig)
    return paths

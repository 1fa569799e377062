"""Run manifests, CSV tables, and static figures.

Every CLI run drops a manifest.json with the fully resolved config next to
its outputs. The report path renders matplotlib figures to files alongside
the delimited output; nothing opens a display.
"""

from __future__ import annotations

import csv
import datetime
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .config import ModelConfig
from .metrics import METRIC_ORDER, MetricReport


def write_manifest(out_dir, cfg: ModelConfig, command: str, extra: dict = None) -> Path:
    from . import __version__
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "created": datetime.datetime.now().isoformat(timespec="seconds"),
        "seed": cfg.train.seed,
        "config": cfg.to_dict(),
        "versions": {
            "polypvs": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


# ---------------------------------------------------------------------------
# delimited tables


def write_frame_csv(path, report: MetricReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + list(METRIC_ORDER))
        for row in report.rows():
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    return path


def read_frame_csv(path) -> MetricReport:
    report = MetricReport()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame"] + list(METRIC_ORDER):
            raise ValueError(f"{path} is not a per-frame metrics table")
        for row in reader:
            report.append(row[0], dict(zip(METRIC_ORDER, map(float, row[1:]))))
    return report


def write_summary_csv(path, rows: dict) -> Path:
    """``rows`` maps a label (subset, clip, or variant) to an aggregate dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name"] + list(METRIC_ORDER))
        for name, agg in rows.items():
            writer.writerow([name] + [f"{agg[m]:.6f}" for m in METRIC_ORDER])
    return path


def format_summary_table(rows: dict) -> str:
    width = max([len("name")] + [len(str(n)) for n in rows])
    header = "name".ljust(width) + "".join(f"  {m:>11}" for m in METRIC_ORDER)
    lines = [header]
    for name, agg in rows.items():
        lines.append(str(name).ljust(width)
                     + "".join(f"  {agg[m]:>11.4f}" for m in METRIC_ORDER))
    return "\n".join(lines)


def read_loss_log(path):
    """training_log.csv -> (steps, losses) arrays."""
    steps, losses = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    return np.asarray(steps), np.asarray(losses)


# ---------------------------------------------------------------------------
# figures


def loss_curve_figure(steps, losses, path) -> Path:
    if len(losses) == 0:
        raise ValueError("empty loss log; nothing to plot")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def metric_bar_figure(aggregate: dict, path, title: str = "metrics") -> Path:
    if not aggregate:
        raise ValueError("empty metric table; nothing to plot")
    vals = [aggregate[m] for m in METRIC_ORDER]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bars = ax.bar(range(len(vals)), vals, color="tab:blue")
    ax.set_xticks(range(len(vals)), METRIC_ORDER, rotation=20)
    ax.set_ylim(0, 1.05)
    ax.bar_label(bars, fmt="%.3f", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def dice_timeline_figure(report: MetricReport, path) -> Path:
    if len(report) == 0:
        raise ValueError("empty metric report; nothing to plot")
    by_clip = {}
    for i, fid in enumerate(report.frame_ids):
        clip = fid.rsplit("/", 1)[0] if "/" in fid else ""
        by_clip.setdefault(clip, []).append(report.per_frame["dice"][i])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for clip, values in by_clip.items():
        ax.plot(range(len(values)), values, lw=1.0, label=clip or "clip")
    ax.set_xlabel("frame")
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    if len(by_clip) <= 12:
        ax.legend(fontsize=7)
    ax.set_title("per-frame Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def emit_report(out_dir, loss_log=None, frame_csv=None) -> list:
    """Render figures (and a summary CSV) from existing run outputs."""
    if loss_log is None and frame_csv is None:
        raise ValueError("nothing to report: provide a loss log or a metrics table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if loss_log is not None:
        steps, losses = read_loss_log(loss_log)
        if len(losses) == 0:
            raise ValueError(f"loss log {loss_log} has no rows")
        written.append(loss_curve_figure(steps, losses, out_dir / "loss_curve.png"))
    if frame_csv is not None:
        report = read_frame_csv(frame_csv)
        if len(report) == 0:
            raise ValueError(f"metrics table {frame_csv} has no rows")
        agg = report.aggregate()
        written.append(write_summary_csv(out_dir / "summary.csv", {"all": agg}))
        written.append(metric_bar_figure(agg, out_dir / "metric_bars.png"))
        written.append(dice_timeline_figure(report, out_dir / "dice_timeline.png"))
    return written

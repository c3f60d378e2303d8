"""Report rendering: a human-readable table, machine-readable JSON, a
tab-delimited dump, and matplotlib figures written next to them."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first

from .metrics import MetricReport


def render_table(reports: Mapping[str, MetricReport], percent: bool = True) -> str:
    """Fixed-width text table, metrics as percents by default to match how
    published results are usually quoted."""
    rows = [("task", "metric", "value", "n")]
    for task in sorted(reports):
        report = reports[task].as_percent() if percent else reports[task]
        n = report.counts.get("items", report.counts.get("conversations", 0))
        for metric in sorted(report.values):
            value = report.values[metric]
            rows.append((task, metric, f"{value:.2f}" if percent else f"{value:.6f}", str(n)))
    widths = [max(len(row[col]) for row in rows) for col in range(4)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[col]) for col, cell in enumerate(row)))
        if i == 0:
            lines.append("  ".join("-" * widths[col] for col in range(4)))
    return "\n".join(lines)


def report_payload(reports: Mapping[str, MetricReport]) -> dict:
    return {task: reports[task].to_dict() for task in sorted(reports)}


def write_report_json(path, reports: Mapping[str, MetricReport]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report_payload(reports), handle, indent=2, sort_keys=True)
        handle.write("\n")


def read_report_json(path) -> dict:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def write_report_tsv(path, reports: Mapping[str, MetricReport]) -> None:
    """One (task, metric, fraction, percent) row per metric."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(["task", "metric", "value", "percent"])
        for task in sorted(reports):
            report = reports[task]
            for metric in sorted(report.values):
                value = report.values[metric]
                writer.writerow([task, metric, repr(value), f"{value * 100.0:.2f}"])


def render_metrics_figure(reports: Mapping[str, MetricReport], path) -> Path:
    """Bar chart of every metric, grouped by task, saved as a PNG."""
    labels = []
    values = []
    for task in sorted(reports):
        report = reports[task]
        for metric in sorted(report.values):
            labels.append(f"{task}\n{metric}")
            values.append(report.values[metric] * 100.0)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(labels)), 4.0))
    ax.bar(range(len(values)), values, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 100)
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_loss_figure(traces: Mapping[int, Sequence[float]], path) -> Path:
    """Per-stage loss curves on one set of axes, saved as a PNG."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    offset = 0
    for stage_id in sorted(traces):
        trace = list(traces[stage_id])
        xs = list(range(offset, offset + len(trace)))
        ax.plot(xs, trace, label=f"stage {stage_id}")
        offset += len(trace)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def load_loss_traces(run_manifest_path) -> dict[int, list[float]]:
    """Pull the per-stage loss traces back out of a run manifest."""
    traces: dict[int, list[float]] = {}
    with open(run_manifest_path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            event = json.loads(line)
            if event.get("event") == "loss_trace":
                traces[int(event["stage_id"])] = [float(v) for v in event["values"]]
    return traces


def write_predictions(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(dict(row), ensure_ascii=False, sort_keys=True) + "\n")


def read_predictions(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows

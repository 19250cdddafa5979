"""Report rendering: versioned JSON, delimited CSV, terminal tables, figures.

Figure rendering uses the Agg backend so the report path works headless;
PNGs land next to the delimited outputs.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .harness import EvalReport

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1

Rows = Sequence[tuple[str, EvalReport]]


def report_payload(rows: Rows) -> dict:
    return {
        "report_schema": REPORT_SCHEMA,
        "rows": [{"label": label, **report.to_payload()} for label, report in rows],
    }


def write_report_json(rows: Rows, path: str | Path) -> None:
    text = json.dumps(report_payload(rows), sort_keys=True, ensure_ascii=False, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _split_names(rows: Rows) -> list[str]:
    names: set[str] = set()
    for _, report in rows:
        names.update(report.splits)
    return sorted(names)


def write_report_csv(rows: Rows, path: str | Path) -> None:
    splits = _split_names(rows)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "overall", *splits, "total"])
        for label, report in rows:
            writer.writerow(
                [
                    label,
                    f"{report.overall:.6f}",
                    *(f"{report.splits[s]:.6f}" if s in report.splits else "" for s in splits),
                    report.counts.get("total", ""),
                ]
            )


def format_report_table(rows: Rows) -> str:
    splits = _split_names(rows)
    header = ["row", "overall", *splits, "n"]
    body = [
        [
            label,
            f"{report.overall:.4f}",
            *(f"{report.splits[s]:.4f}" if s in report.splits else "-" for s in splits),
            str(report.counts.get("total", "-")),
        ]
        for label, report in rows
    ]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    def fmt(line: list[str]) -> str:
        return "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
    rule = "  ".join("-" * width for width in widths)
    return "\n".join([fmt(header), rule, *(fmt(line) for line in body)])


def render_overall_figure(rows: Rows, path: str | Path, title: str) -> Path:
    """Bar chart of overall accuracy per row (ablation-style reports)."""
    labels = [label for label, _ in rows]
    values = [report.overall for _, report in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(rows)), 4.0))
    ax.bar(range(len(rows)), values, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    for i, value in enumerate(values):
        ax.text(i, value + 0.01, f"{value:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sweep_figure(rows: Rows, path: str | Path, title: str) -> Path:
    """Line chart over swept k; one line per strategy when labels carry one."""
    series: dict[str, list[tuple[str, float]]] = {}
    for label, report in rows:
        if "," in label:
            strategy, k_part = label.split(",", 1)
        else:
            strategy, k_part = "srt", label
        k_value = k_part.split("=", 1)[-1]
        series.setdefault(strategy, []).append((k_value, report.overall))

    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    x_labels: list[str] = []
    for points in series.values():
        for k_value, _ in points:
            if k_value not in x_labels:
                x_labels.append(k_value)
    positions = {k_value: i for i, k_value in enumerate(x_labels)}
    for strategy, points in sorted(series.items()):
        xs = [positions[k_value] for k_value, _ in points]
        ys = [value for _, value in points]
        ax.plot(xs, ys, marker="o", label=strategy)
    ax.set_xticks(range(len(x_labels)))
    ax.set_xticklabels(x_labels)
    ax.set_xlabel("k")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report_bundle(
    rows: Rows,
    out_dir: str | Path,
    title: str,
    figure_kind: str = "bar",
    figures: bool = True,
) -> dict[str, str]:
    """Write report.json / report.csv / report.txt (+ figure) into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": str(out / "report.json"),
        "csv": str(out / "report.csv"),
        "txt": str(out / "report.txt"),
    }
    write_report_json(rows, paths["json"])
    write_report_csv(rows, paths["csv"])
    Path(paths["txt"]).write_text(format_report_table(rows) + "\n", encoding="utf-8")
    if figures:
        figure_path = out / "report.png"
        if figure_kind == "line":
            render_sweep_figure(rows, figure_path, title)
        else:
            render_overall_figure(rows, figure_path, title)
        paths["figure"] = str(figure_path)
    return paths

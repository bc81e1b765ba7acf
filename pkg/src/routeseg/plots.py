"""Deterministic SVG/CSV rendering of run artifacts.

Pure file transformations: routing-stats CSVs become bar charts, run reports
become loss/metric curves, ablation CSVs become SVG tables. Output is built
from plain strings, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

__all__ = ["PlotError", "plot_routing_csv", "plot_report_curves", "plot_ablation_csv", "plot_any"]


class PlotError(ValueError):
    pass


_SVG_HEADER = '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">'
_STYLE = (
    '<style>text{font-family:monospace;font-size:12px}'
    '.t{font-size:14px;font-weight:bold}</style>'
)


def _read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise PlotError(f"{path}: empty CSV")
        rows = list(reader)
    return list(reader.fieldnames), rows


def _require(fields: list[str], needed: list[str], path) -> None:
    for col in needed:
        if col not in fields:
            raise PlotError(f"{path}: missing column {col!r}")


def plot_routing_csv(csv_path, out_path) -> None:
    """Per-expert bar chart of mean routing weight and selection frequency."""
    fields, rows = _read_csv(csv_path)
    _require(fields, ["expert_id", "mean_weight", "selection_freq"], csv_path)
    if not rows:
        raise PlotError(f"{csv_path}: no data rows")
    width, height = 420, 240
    base_y, max_h = 190, 140
    bar_w, gap = 40, 30
    parts = [_SVG_HEADER.format(w=width, h=height), _STYLE]
    parts.append('<text class="t" x="10" y="20">routing weights per expert</text>')
    x = 40
    for row in rows:
        try:
            mean_w = float(row["mean_weight"])
            freq = float(row["selection_freq"])
        except (TypeError, ValueError) as exc:
            raise PlotError(f"{csv_path}: non-numeric row {row!r}") from exc
        h1 = mean_w * max_h
        h2 = min(freq, 1.0) * max_h
        parts.append(
            f'<rect x="{x}" y="{base_y - h1:.1f}" width="{bar_w}" height="{h1:.1f}" fill="#4878cf"/>'
        )
        parts.append(
            f'<rect x="{x + bar_w + 4}" y="{base_y - h2:.1f}" width="{bar_w // 2}" '
            f'height="{h2:.1f}" fill="#b0b0b0"/>'
        )
        parts.append(f'<text x="{x}" y="{base_y + 16}">e{row["expert_id"]}</text>')
        parts.append(f'<text x="{x}" y="{base_y - h1 - 4:.1f}">{mean_w:.3f}</text>')
        x += bar_w + bar_w // 2 + gap
    parts.append(
        f'<text x="10" y="{height - 8}">blue: mean weight, gray: selection frequency</text>'
    )
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts))


def _polyline(values: list[float], x0, y0, w, h, lo, hi, color) -> str:
    if len(values) == 1:
        values = values * 2
    span = (hi - lo) or 1.0
    pts = []
    for i, v in enumerate(values):
        x = x0 + w * i / (len(values) - 1)
        y = y0 + h - h * (v - lo) / span
        pts.append(f"{x:.1f},{y:.1f}")
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>'


def plot_report_curves(report_path, out_path) -> None:
    """Training-loss and validation-mIoU curves from a run report."""
    report = json.loads(Path(report_path).read_text())
    for key in ("train_loss_curve", "val_miou_curve"):
        if key not in report:
            raise PlotError(f"{report_path}: missing column {key!r}")
    loss = [float(v) for v in report["train_loss_curve"]]
    miou = [float(v) for v in report["val_miou_curve"]]
    if not loss or not miou:
        raise PlotError(f"{report_path}: empty curves")
    width, height = 460, 260
    parts = [_SVG_HEADER.format(w=width, h=height), _STYLE]
    parts.append('<text class="t" x="10" y="20">training curves</text>')
    parts.append(_polyline(loss, 50, 40, 380, 80, min(loss), max(loss), "#c44e52"))
    parts.append(f'<text x="10" y="50">loss {min(loss):.3f}..{max(loss):.3f}</text>')
    parts.append(_polyline(miou, 50, 150, 380, 80, min(miou), max(miou), "#4878cf"))
    parts.append(f'<text x="10" y="160">mIoU {min(miou):.2f}..{max(miou):.2f}</text>')
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts))


def plot_ablation_csv(csv_path, out_path) -> None:
    """Render an ablation CSV as an SVG table."""
    fields, rows = _read_csv(csv_path)
    if not rows:
        raise PlotError(f"{csv_path}: no data rows")
    width = 60 + 110 * len(fields)
    height = 60 + 22 * len(rows)
    parts = [_SVG_HEADER.format(w=width, h=height), _STYLE]
    y = 24
    parts.append(
        "".join(
            f'<text class="t" x="{20 + 110 * i}" y="{y}">{name}</text>'
            for i, name in enumerate(fields)
        )
    )
    for row in rows:
        y += 22
        parts.append(
            "".join(
                f'<text x="{20 + 110 * i}" y="{y}">{row[name][:14]}</text>'
                for i, name in enumerate(fields)
            )
        )
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts))


def plot_any(input_path, out_dir) -> list[str]:
    """Dispatch on the artifact type; returns the files written."""
    path = Path(input_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if path.suffix == ".json":
        target = out / (path.stem + "_curves.svg")
        plot_report_curves(path, target)
        written.append(str(target))
    elif path.suffix == ".csv":
        fields, _ = _read_csv(path)
        if "expert_id" in fields:
            target = out / (path.stem + "_bars.svg")
            plot_routing_csv(path, target)
        else:
            target = out / (path.stem + "_table.svg")
            plot_ablation_csv(path, target)
        written.append(str(target))
    else:
        raise PlotError(f"cannot plot {path.name!r}: expected .json or .csv")
    return written

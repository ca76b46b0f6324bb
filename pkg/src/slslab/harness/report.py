"""Report files: run summaries, a comparison table and plot-ready columns.

Plot-data files are whitespace-separated text with one header line, e.g.
``scale_weight_grid.txt`` (``pred_pixels gt_pixels scale_p scale_gt w``) and
``location_grid.txt`` (``dx dy polar L1 L2``).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np

from ..losses import Centroid, polar_penalty, scale_weight
from ..tensor import Tensor
from .ablation import METRICS, record_metrics
from .train import RunRecord


def scale_weight_grid(pixels: Sequence[int] = tuple(range(1, 101)), area: int = 256 * 256) -> list[tuple]:
    """``w`` over pairs of predicted / ground-truth pixel counts, normalized by ``area``."""
    rows = []
    for p in pixels:
        for g in pixels:
            a, b = p / area, g / area
            rows.append((p, g, a, b, scale_weight(a, b).item()))
    return rows


def location_grid(
    offsets: Sequence[float] = tuple(range(-100, 101, 4)),
    center: tuple[float, float] = (128.0, 128.0),
    image_size: tuple[int, int] = (256, 256),
) -> list[tuple]:
    """Location penalties for a predicted centroid offset by (dx, dy) from ``center``."""
    diag = float(np.hypot(*image_size))
    c_gt = Centroid(Tensor(center[0]), Tensor(center[1]))
    rows = []
    for dy in offsets:
        for dx in offsets:
            c_p = Centroid(Tensor(center[0] + dx), Tensor(center[1] + dy))
            rows.append((dx, dy, polar_penalty(c_p, c_gt).item(), (abs(dx) + abs(dy)) / diag, float(np.hypot(dx, dy)) / diag))
    return rows


def _columns(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [" ".join(header)]
    for r in rows:
        lines.append(" ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def comparison_csv(records: Sequence[tuple[str, RunRecord]]) -> str:
    """One row per distinct training configuration, min/median/max over its seeds."""
    groups: dict[str, list[RunRecord]] = {}
    for _, rec in records:
        groups.setdefault(json.dumps(rec.config, sort_keys=True), []).append(rec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["loss", "location", "supervised_scales", "n_runs"]
    for m in METRICS:
        header += [f"{m}_min", f"{m}_median", f"{m}_max"]
    w.writerow(header)
    for key in sorted(groups):
        recs = groups[key]
        cfg = recs[0].config
        line = [cfg["loss"], cfg["location"], cfg["supervised_scales"], len(recs)]
        for m in METRICS:
            vals = [v for v in (record_metrics(r)[m] for r in recs) if v is not None]
            line += [repr(min(vals)), repr(median(vals)), repr(max(vals))] if vals else ["", "", ""]
        w.writerow(line)
    return buf.getvalue()


def emit_report(records: Sequence[tuple[str, RunRecord]], out_dir) -> list[Path]:
    """Write ``runs.json``, ``comparison.csv`` and the plot-data text files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    runs = [{"name": name, "seed": r.seed, "status": r.status, "config": r.config, **record_metrics(r)} for name, r in records]
    p = out / "runs.json"
    p.write_text(json.dumps(runs, indent=1, sort_keys=True) + "\n")
    written.append(p)

    p = out / "comparison.csv"
    p.write_text(comparison_csv(records))
    written.append(p)

    curves = []
    for name, r in records:
        curves.append((name, 0, r.initial_loss))
        curves += [(name, h["epoch"], h["loss"]) for h in r.history]
    p = out / "loss_curves.txt"
    p.write_text(_columns(("run", "epoch", "loss"), curves))
    written.append(p)

    p = out / "scale_weight_grid.txt"
    p.write_text(_columns(("pred_pixels", "gt_pixels", "scale_p", "scale_gt", "w"), scale_weight_grid()))
    written.append(p)

    p = out / "location_grid.txt"
    p.write_text(_columns(("dx", "dy", "polar", "L1", "L2"), location_grid()))
    written.append(p)
    return written


def load_records(paths: Sequence) -> list[tuple[str, RunRecord]]:
    """Load records from run directories, record files, or directories containing runs."""
    found: list[Path] = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif (p / "record.json").exists():
            found.append(p / "record.json")
        elif p.is_dir():
            found += sorted(p.rglob("record.json"))
        else:
            raise FileNotFoundError(p)
    return [(str(f.parent), RunRecord.load(f)) for f in found]

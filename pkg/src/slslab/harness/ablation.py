"""Run a matrix of training configurations over shared seeds and tabulate them."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

from ..losses import supervised_indices
from .config import TrainConfig, apply_overrides
from .train import DivergenceError, RunRecord, train

log = logging.getLogger(__name__)

# name -> (config key, values); rows appear in this order
PRESETS: dict[str, tuple[str, list]] = {
    "losses": ("loss", ["iou", "dice", "sls"]),
    "terms": ("loss", ["iou", "scale", "sls"]),
    "scales": ("supervised_scales", [0, 1, 2, 3, 4]),
    "location": ("location", ["L2", "L1", "polar"]),
}
METRICS = ("iou", "pd", "fa", "final_loss")


def supervised_label(num_side: int) -> str:
    names = [f"p{i}" for i in supervised_indices(num_side)] + ["p"]
    return ", ".join(names)


def config_matrix(base: TrainConfig, key: str, values) -> list[tuple[str, TrainConfig]]:
    """One labelled configuration per value of ``key``."""
    rows = []
    for v in values:
        cfg = apply_overrides(base, {key: str(v) if not isinstance(v, str) else v})
        rows.append((f"{key}={v}", cfg))
    if len(rows) < 2:
        raise ValueError("an ablation needs at least two configurations")
    return rows


def preset_matrix(base: TrainConfig, preset: str) -> list[tuple[str, TrainConfig]]:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    key, values = PRESETS[preset]
    if key == "location":
        base = base.replace(loss="sls")
    return config_matrix(base, key, values)


def _stats(values: list[float]) -> dict[str, float | None]:
    if not values:
        return {"min": None, "median": None, "max": None}
    return {"min": min(values), "median": median(values), "max": max(values)}


@dataclass
class AblationRow:
    label: str
    config: dict
    runs: list[dict] = field(default_factory=list)  # {"seed", "path" (relative to out_dir), "status"}
    stats: dict[str, dict] = field(default_factory=dict)

    @property
    def supervised(self) -> str:
        return supervised_label(self.config["supervised_scales"])


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "rows": [
                {"label": r.label, "supervised": r.supervised, "config": r.config, "runs": r.runs, "stats": r.stats}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["label", "supervised", "n_ok", "n_failed"]
        for m in METRICS:
            header += [f"{m}_min", f"{m}_median", f"{m}_max"]
        w.writerow(header)
        for r in self.rows:
            ok = sum(run["status"] == "ok" for run in r.runs)
            line = [r.label, r.supervised, ok, len(r.runs) - ok]
            for m in METRICS:
                s = r.stats[m]
                line += ["" if s[k] is None else repr(s[k]) for k in ("min", "median", "max")]
            w.writerow(line)
        return buf.getvalue()

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def save(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.csv").write_text(self.to_csv())
        (out / "table.json").write_text(self.to_json())
        return out / "table.csv", out / "table.json"


def record_metrics(rec: RunRecord) -> dict[str, float | None]:
    rep = rec.report or {}
    return {"iou": rep.get("iou"), "pd": rep.get("pd"), "fa": rep.get("fa"), "final_loss": rec.final_loss}


def ablate(
    matrix: list[tuple[str, TrainConfig]],
    seeds,
    out_dir,
    reuse: bool = True,
) -> AblationTable:
    """Train every (configuration, seed) pair; failed runs are marked, not fatal."""
    out_dir = Path(out_dir)
    rows = []
    for label, cfg in matrix:
        row = AblationRow(label, cfg.training_snapshot())
        values: dict[str, list[float]] = {m: [] for m in METRICS}
        for seed in seeds:
            run_dir = out_dir / label.replace("=", "-") / f"seed{seed}"
            try:
                rec = train(cfg, seed, run_dir=run_dir, reuse=reuse)
                status = "ok"
            except DivergenceError as exc:
                log.warning("%s seed %d diverged: %s", label, seed, exc)
                rec, status = None, "diverged"
            except Exception as exc:  # noqa: BLE001 - one failed run must not sink the table
                log.warning("%s seed %d failed: %s", label, seed, exc)
                rec, status = None, f"failed: {exc}"
            rel = run_dir.relative_to(out_dir) / "record.json"  # relative, so tables do not depend on where they live
            row.runs.append({"seed": int(seed), "path": rel.as_posix(), "status": status})
            if rec is not None:
                for m, v in record_metrics(rec).items():
                    if v is not None:
                        values[m].append(v)
        row.stats = {m: _stats(values[m]) for m in METRICS}
        rows.append(row)
    table = AblationTable(rows)
    table.save(out_dir)
    return table

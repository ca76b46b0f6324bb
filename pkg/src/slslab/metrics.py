"""Pixel- and target-level evaluation: IoU, probability of detection, false-alarm rate."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

REPORT_VERSION = 1
BUCKETS: tuple[tuple[str, float, float], ...] = (
    ("(0,10]", 0, 10),
    ("(10,40]", 10, 40),
    ("(40,inf)", 40, math.inf),
)


class NoTargetsError(ValueError):
    """Probability of detection is undefined without ground-truth targets."""


def bucket_of(pixel_count: int) -> str:
    for name, lo, hi in BUCKETS:
        if lo < pixel_count <= hi:
            return name
    raise ValueError(f"pixel count must be positive, got {pixel_count}")


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """1 where ``pred >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(pred) >= threshold).astype(np.uint8)


# -- connected components ---------------------------------------------------


@dataclass
class Component:
    label: int
    pixel_count: int
    centroid: tuple[float, float]  # (x, y), 1-based column/row


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    components: list[Component]

    @property
    def count(self) -> int:
        return len(self.components)


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def connected_components(mask, connectivity: int = 8) -> ComponentLabeling:
    """Label foreground components with a two-pass union-find sweep.

    Labels are 1..K in order of each component's first pixel in raster order.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask) != 0
    h, w = mask.shape
    provisional = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    offsets = [(0, -1), (-1, 0)] if connectivity == 4 else [(0, -1), (-1, -1), (-1, 0), (-1, 1)]
    for r, c in zip(*np.nonzero(mask)):
        neigh = []
        for dr, dc in offsets:
            rr, cc = r + dr, c + dc
            if 0 <= rr and 0 <= cc < w and provisional[rr, cc]:
                neigh.append(provisional[rr, cc])
        if not neigh:
            parent.append(len(parent))
            provisional[r, c] = len(parent) - 1
            continue
        roots = {_find(parent, n) for n in neigh}
        keep = min(roots)
        for other in roots:
            parent[other] = keep
        provisional[r, c] = keep

    labels = np.zeros((h, w), dtype=np.int64)
    relabel: dict[int, int] = {}
    sums: list[list[float]] = []
    for r, c in zip(*np.nonzero(mask)):
        root = _find(parent, provisional[r, c])
        if root not in relabel:
            relabel[root] = len(relabel) + 1
            sums.append([0, 0.0, 0.0])
        k = relabel[root]
        labels[r, c] = k
        acc = sums[k - 1]
        acc[0] += 1
        acc[1] += c + 1
        acc[2] += r + 1
    comps = [Component(i + 1, int(n), (sx / n, sy / n)) for i, (n, sx, sy) in enumerate(sums)]
    return ComponentLabeling(labels, comps)


# -- matching and metrics ---------------------------------------------------


def match_components(
    gt: ComponentLabeling, pred: ComponentLabeling, match_dist: float = 3.0
) -> list[tuple[int, int, float]]:
    """Greedy nearest-first one-to-one matching of component centroids.

    Returns ``(gt_index, pred_index, distance)`` triples (0-based indices into
    the component lists), only for pairs within ``match_dist``.
    """
    pairs = []
    for gi, g in enumerate(gt.components):
        for pi, p in enumerate(pred.components):
            d = math.hypot(g.centroid[0] - p.centroid[0], g.centroid[1] - p.centroid[1])
            if d <= match_dist:
                pairs.append((d, gi, pi))
    pairs.sort()
    used_g: set[int] = set()
    used_p: set[int] = set()
    out = []
    for d, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out.append((gi, pi, d))
    return out


def _check_lists(preds: Sequence, gts: Sequence) -> None:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")


def pixel_iou(preds: Sequence, gts: Sequence) -> float:
    """Dataset IoU: total intersection over total union (1.0 if both are empty everywhere)."""
    _check_lists(preds, gts)
    inter = union = 0
    for p, g in zip(preds, gts):
        p, g = np.asarray(p) != 0, np.asarray(g) != 0
        inter += int(np.sum(p & g))
        union += int(np.sum(p | g))
    return 1.0 if union == 0 else inter / union


def pixel_iou_per_image(preds: Sequence, gts: Sequence) -> float:
    """Mean of per-image IoU (images with empty union count as 1)."""
    _check_lists(preds, gts)
    vals = [pixel_iou([p], [g]) for p, g in zip(preds, gts)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class DetectionResult:
    pd: float
    n_matched: int
    n_all: int
    matches: list[list[tuple[int, int, float]]]


def prob_detection(preds: Sequence, gts: Sequence, match_dist: float = 3.0, connectivity: int = 8) -> DetectionResult:
    _check_lists(preds, gts)
    matches = []
    n_all = n_matched = 0
    for p, g in zip(preds, gts):
        gl, pl = connected_components(g, connectivity), connected_components(p, connectivity)
        m = match_components(gl, pl, match_dist)
        matches.append(m)
        n_all += gl.count
        n_matched += len(m)
    if n_all == 0:
        raise NoTargetsError("no ground-truth targets in the whole set")
    return DetectionResult(n_matched / n_all, n_matched, n_all, matches)


def false_alarm_rate(
    preds: Sequence,
    gts: Sequence,
    exclude_matched: bool = False,
    match_dist: float = 3.0,
    connectivity: int = 8,
) -> float:
    """False-positive pixels over all pixels, pooled across images.

    With ``exclude_matched`` the pixels of predicted components matched to a
    target are not counted as false positives.
    """
    _check_lists(preds, gts)
    p_false = p_all = 0
    for p, g in zip(preds, gts):
        p, g = np.asarray(p) != 0, np.asarray(g) != 0
        fp = p & ~g
        if exclude_matched:
            gl, pl = connected_components(g, connectivity), connected_components(p, connectivity)
            for _, pi, _ in match_components(gl, pl, match_dist):
                fp &= pl.labels != pl.components[pi].label
        p_false += int(fp.sum())
        p_all += p.size
    return p_false / p_all if p_all else 0.0


# -- report -----------------------------------------------------------------


@dataclass
class TargetRecord:
    image: int
    centroid: tuple[float, float]
    pixel_count: int


@dataclass
class BucketMetrics:
    n_targets: int
    n_matched: int
    n_images: int
    pd: float
    iou: float
    fa: float


@dataclass
class EvalReport:
    iou: float
    iou_per_image: float
    pd: float | None
    fa: float
    p_false: int
    p_all: int
    n_matched: int
    n_all: int
    buckets: dict[str, BucketMetrics | None]
    matched: list[TargetRecord] = field(default_factory=list)
    missed: list[TargetRecord] = field(default_factory=list)
    false_alarms: list[TargetRecord] = field(default_factory=list)
    rule: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        return json.loads(json.dumps(d))  # plain floats and lists, as stored on disk

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def bucket_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bucket", "present", "n_targets", "n_matched", "n_images", "pd", "iou", "fa"])
        for name, _, _ in BUCKETS:
            b = self.buckets.get(name)
            if b is None:
                writer.writerow([name, 0, 0, 0, 0, "", "", ""])
            else:
                writer.writerow([name, 1, b.n_targets, b.n_matched, b.n_images, repr(b.pd), repr(b.iou), repr(b.fa)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        version = d.pop("version", None)
        if version != REPORT_VERSION:
            raise ValueError(f"unsupported report version {version}")
        d["buckets"] = {k: None if v is None else BucketMetrics(**v) for k, v in d["buckets"].items()}
        for key in ("matched", "missed", "false_alarms"):
            d[key] = [TargetRecord(r["image"], tuple(r["centroid"]), r["pixel_count"]) for r in d[key]]
        return cls(**d)


def bucketed_eval(
    preds: Sequence,
    gts: Sequence,
    match_dist: float = 3.0,
    exclude_matched_fa: bool = False,
    connectivity: int = 8,
    threshold: float | None = None,
) -> EvalReport:
    """Full report over binary predictions, with a per-target-size breakdown.

    A bucket's Pd counts only targets whose pixel count lies in the bucket; its
    IoU and Fa are computed over the images that contain at least one such
    target.  Buckets without targets are reported as ``None``.
    """
    _check_lists(preds, gts)
    preds = [np.asarray(p) != 0 for p in preds]
    gts = [np.asarray(g) != 0 for g in gts]
    matched: list[TargetRecord] = []
    missed: list[TargetRecord] = []
    false_alarms: list[TargetRecord] = []
    per_image_fp: list[int] = []
    bucket_targets = {name: [0, 0] for name, _, _ in BUCKETS}
    bucket_images: dict[str, set[int]] = {name: set() for name, _, _ in BUCKETS}

    for idx, (p, g) in enumerate(zip(preds, gts)):
        gl, pl = connected_components(g, connectivity), connected_components(p, connectivity)
        m = match_components(gl, pl, match_dist)
        hit_g = {gi for gi, _, _ in m}
        hit_p = {pi for _, pi, _ in m}
        fp = p & ~g
        if exclude_matched_fa:
            for pi in hit_p:
                fp &= pl.labels != pl.components[pi].label
        per_image_fp.append(int(fp.sum()))
        for gi, comp in enumerate(gl.components):
            rec = TargetRecord(idx, comp.centroid, comp.pixel_count)
            bucket = bucket_of(comp.pixel_count)
            bucket_targets[bucket][0] += 1
            bucket_images[bucket].add(idx)
            if gi in hit_g:
                matched.append(rec)
                bucket_targets[bucket][1] += 1
            else:
                missed.append(rec)
        for pi, comp in enumerate(pl.components):
            if pi not in hit_p:
                false_alarms.append(TargetRecord(idx, comp.centroid, comp.pixel_count))

    p_all = int(sum(p.size for p in preds))
    p_false = int(sum(per_image_fp))
    n_all = len(matched) + len(missed)
    buckets: dict[str, BucketMetrics | None] = {}
    for name, _, _ in BUCKETS:
        n_t, n_m = bucket_targets[name]
        if n_t == 0:
            buckets[name] = None
            continue
        imgs = sorted(bucket_images[name])
        pix = sum(preds[i].size for i in imgs)
        buckets[name] = BucketMetrics(
            n_targets=n_t,
            n_matched=n_m,
            n_images=len(imgs),
            pd=n_m / n_t,
            iou=pixel_iou([preds[i] for i in imgs], [gts[i] for i in imgs]),
            fa=sum(per_image_fp[i] for i in imgs) / pix,
        )
    return EvalReport(
        iou=pixel_iou(preds, gts),
        iou_per_image=pixel_iou_per_image(preds, gts),
        pd=len(matched) / n_all if n_all else None,
        fa=p_false / p_all if p_all else 0.0,
        p_false=p_false,
        p_all=p_all,
        n_matched=len(matched),
        n_all=n_all,
        buckets=buckets,
        matched=matched,
        missed=missed,
        false_alarms=false_alarms,
        rule={
            "match": "centroid distance <= match_dist, greedy nearest-first, one-to-one",
            "match_dist": match_dist,
            "connectivity": connectivity,
            "fa_excludes_matched": exclude_matched_fa,
            "threshold": threshold,
        },
    )

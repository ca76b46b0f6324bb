"""Acceptance gate: one PASS/FAIL line per criterion, printed uncaptured.

Criteria 5 and 6 train nine small models (about a quarter hour on one core).
Set ``SLSLAB_ACCEPTANCE_DIR`` to keep those runs between invocations; matching
runs are then reused instead of retrained.
"""

from __future__ import annotations

import filecmp
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from bfs import bfs_partition, partition_of
from identities import CHECKS
from slslab import gradcheck
from slslab.cli import main
from slslab.harness.config import TrainConfig
from slslab.harness.report import location_grid, scale_weight_grid
from slslab.harness.train import train
from slslab.losses import dice_loss, scale_sensitive_loss, scale_weight, sls_loss, soft_iou_loss
from slslab.metrics import connected_components, false_alarm_rate, prob_detection
from slslab.synth import SceneConfig, generate_dataset

SEEDS = (0, 1, 2)


@pytest.fixture
def announce(capsys):
    def say(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")

    return say


# -- 1: gradients -------------------------------------------------------------


def test_criterion_1_gradient_suite(announce):
    t0 = time.perf_counter()
    errors = gradcheck.run_all(trials=50, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < gradcheck.TOLERANCE and elapsed < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errors.items())
    announce(1, ok, f"max rel. error {worst:.2e} over {len(errors)} suites x 50 trials in {elapsed:.0f}s ({detail})")
    assert ok


# -- 2: worked examples -------------------------------------------------------


def test_criterion_2_identity_suite(announce):
    failures = []
    for module, name, fn in CHECKS:
        try:
            fn()
        except Exception as exc:  # report every failing example, not just the first
            failures.append(f"{module}-{name}: {type(exc).__name__} {exc}")
    ok = not failures
    announce(2, ok, f"{len(CHECKS) - len(failures)}/{len(CHECKS)} examples pass" + "".join(f"\n  {f}" for f in failures))
    assert ok


# -- 3: equal IoU, different scale or position --------------------------------


def _box(shape, r0, r1, c0, c1):
    m = np.zeros(shape)
    m[r0:r1, c0:c1] = 1.0
    return m


def equal_iou_scale_pairs():
    """(gt, small, large): the small prediction sits inside gt, the large one contains it, both with IoU 1/4."""
    shape = (32, 32)
    yield _box(shape, 10, 14, 10, 14), _box(shape, 11, 13, 11, 13), _box(shape, 8, 16, 8, 16)
    yield _box(shape, 4, 10, 20, 26), _box(shape, 5, 8, 21, 24), _box(shape, 1, 13, 17, 29)
    yield _box(shape, 16, 18, 3, 11), _box(shape, 16, 17, 5, 9), _box(shape, 15, 19, 0, 16)


def translated_pairs():
    """(gt, a, b): two shifts of gt with identical overlap but different centroid offsets."""
    gt = _box((32, 32), 4, 8, 18, 22)
    shift = lambda dr, dc: np.roll(np.roll(gt, dr, 0), dc, 1)
    yield gt, shift(0, 2), shift(2, 0)
    yield gt, shift(0, 2), shift(0, -2)
    yield gt, shift(0, 1), shift(-1, 0)


def test_criterion_3_equal_iou_pairs(announce):
    lines, ok = [], True
    for gt, a, b in equal_iou_scale_pairs():
        iou_a, iou_b = soft_iou_loss(a, gt).item(), soft_iou_loss(b, gt).item()
        dice_a, dice_b = dice_loss(a, gt).item(), dice_loss(b, gt).item()
        ls_a, ls_b = scale_sensitive_loss(a, gt).item(), scale_sensitive_loss(b, gt).item()
        good = abs(iou_a - iou_b) <= 1e-12 and abs(dice_a - dice_b) <= 1e-12 and abs(ls_a - ls_b) > 1e-3
        ok &= good
        lines.append(f"scale pair: IoU loss {iou_a:.6f}/{iou_b:.6f} Dice {dice_a:.6f}/{dice_b:.6f} L_S {ls_a:.6f}/{ls_b:.6f}")
    for gt, a, b in translated_pairs():
        iou_a, iou_b = soft_iou_loss(a, gt).item(), soft_iou_loss(b, gt).item()
        s_a, s_b = sls_loss(a, gt).total.item(), sls_loss(b, gt).total.item()
        good = abs(iou_a - iou_b) <= 1e-12 and abs(s_a - s_b) > 1e-3
        ok &= good
        lines.append(f"translated pair: IoU loss {iou_a:.6f}/{iou_b:.6f} L_SLS {s_a:.6f}/{s_b:.6f}")
    announce(3, ok, "".join(f"\n  {line}" for line in lines))
    assert ok


# -- 4: shape of w and L_L ----------------------------------------------------


def _first_rise(m: float) -> int | None:
    """Smallest ratio r in 1..99 with w(m, m (r+1)) >= w(m, m r), if any."""
    row = [scale_weight(m, m * r).item() for r in range(1, 101)]
    for r, (a, b) in enumerate(zip(row, row[1:]), start=1):
        if b >= a:
            return r
    return None


def test_criterion_4_weight_and_location_shape(announce):
    mins = np.geomspace(1e-5, 5e-4, 25)  # ratio 100 keeps every pair at or below 0.05
    diagonal_ok = all(scale_weight(s, s).item() == 1.0 for s in np.geomspace(1e-5, 0.05, 50))
    rises = {float(m): _first_rise(float(m)) for m in mins}
    bad = {m: r for m, r in rises.items() if r is not None}
    pixel_rows = {}
    for p, g, _, _, w in scale_weight_grid():
        pixel_rows.setdefault(p, {})[g] = w
    pixel_ok = all(
        all(b < a for a, b in zip(row, row[1:]))
        for p, cols in pixel_rows.items()
        for row in [[cols[p * r] for r in range(1, 101) if p * r <= 100]]
    )
    loc = location_grid()
    zero = [polar for dx, dy, polar, _, _ in loc if dx == 0 and dy == 0]
    loc_ok = zero == [0.0] and all(0.0 <= polar <= 2.0 for _, _, polar, _, _ in loc)
    ok = diagonal_ok and not bad and loc_ok
    detail = [
        f"diagonal w == 1: {diagonal_ok}",
        f"normalized rows strictly decreasing for {len(mins) - len(bad)}/{len(mins)} mins in [1e-5, 5e-4]",
        f"pixel grid (1..100 px on 256x256) rows strictly decreasing: {pixel_ok}",
        f"L_L zero at zero offset and within [0, 2] on {len(loc)} offsets: {loc_ok}",
    ]
    if bad:
        m, r = min(bad.items())
        detail.append(
            f"first rise at min {m:.3g}, ratio {r}: w turns upward once (max - min)^2 > 4 min, "
            f"which happens inside the domain for min > {4 / 99**2:.3g}"
        )
    announce(4, ok, "".join(f"\n  {line}" for line in detail))
    assert ok


# -- 5 and 6: directional training comparisons --------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    keep = os.environ.get("SLSLAB_ACCEPTANCE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("acceptance")
    data = root / "dataset"
    if not (data / "manifest.json").exists():
        generate_dataset(SceneConfig(), 200, 50, data)
    base = TrainConfig(dataset=str(data))
    variants = {
        "sls-4": base.replace(loss="sls", supervised_scales=4),
        "iou-4": base.replace(loss="iou", supervised_scales=4),
        "sls-p": base.replace(loss="sls", supervised_scales=0),
    }
    results = {}
    for name, cfg in variants.items():
        t0 = time.perf_counter()
        ious = [train(cfg, s, run_dir=root / name / f"seed{s}", reuse=True).report["iou"] for s in SEEDS]
        results[name] = (ious, time.perf_counter() - t0)
    return results


def _fmt(ious):
    return "[" + ", ".join(f"{v:.4f}" for v in ious) + f"] median {statistics.median(ious):.4f}"


def test_criterion_5_sls_vs_iou_loss(trained, announce):
    sls, t_sls = trained["sls-4"]
    iou, t_iou = trained["iou-4"]
    ok = statistics.median(sls) >= statistics.median(iou)
    announce(5, ok, f"test IoU with SLS {_fmt(sls)} vs IoU loss {_fmt(iou)}; training time {(t_sls + t_iou) / 60:.1f} min")
    assert ok


def test_criterion_6_four_scales_vs_one(trained, announce):
    four, _ = trained["sls-4"]
    one, _ = trained["sls-p"]
    ok = statistics.median(four) >= statistics.median(one)
    announce(6, ok, f"test IoU with 4 supervised scales {_fmt(four)} vs fused output only {_fmt(one)}")
    assert ok


# -- 7: metrics against oracles -----------------------------------------------


def test_criterion_7_metrics_oracles(announce):
    rng = np.random.default_rng(7)
    agree = 0
    for k in range(1000):
        m = rng.random((32, 32)) < rng.uniform(0.02, 0.6)
        agree += partition_of(connected_components(m).labels) == bfs_partition(m)

    g1 = np.zeros((8, 8)); g1[1, 1] = g1[6, 6] = 1
    p1 = np.zeros((8, 8)); p1[1, 2] = p1[2, 6] = 1
    g2 = np.zeros((8, 8)); g2[4, 4] = 1
    g3 = np.zeros((8, 8))
    p3 = np.zeros((8, 8)); p3[0, 0] = p3[7, 7] = 1
    preds, gts = [p1, np.zeros((8, 8)), p3], [g1, g2, g3]
    pd, fa = prob_detection(preds, gts).pd, false_alarm_rate(preds, gts)
    fixture_ok = math.isclose(pd, 1 / 3, abs_tol=1e-12) and math.isclose(fa, 4 / 192, abs_tol=1e-12)

    one = np.zeros((256, 256)); one[100, 37] = 1
    single = false_alarm_rate([one], [np.zeros((256, 256))])

    ok = agree == 1000 and fixture_ok and single == 1 / 65536
    announce(7, ok, f"labeling agrees with flood fill on {agree}/1000 masks; fixture Pd {pd:.15f} Fa {fa:.15f}; "
                    f"single pixel Fa {single!r}")
    assert ok


# -- 8: determinism -----------------------------------------------------------


def _same_tree(a: Path, b: Path, skip=("timing.json",)) -> list[str]:
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name not in skip)
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name not in skip)
    if files_a != files_b:
        return [f"file lists differ: {files_a} vs {files_b}"]
    return [str(f) for f in files_a if not filecmp.cmp(a / f, b / f, shallow=False)]


def test_criterion_8_cli_determinism(tmp_path, announce, capsys):
    def twice(name, make_args):
        outs = []
        for k in (1, 2):
            capsys.readouterr()
            code = main([str(x) for x in make_args(tmp_path / f"{name}{k}")])
            assert code == 0, name
            outs.append(capsys.readouterr().out.replace(str(tmp_path / f"{name}{k}"), "<out>"))
        diffs = _same_tree(tmp_path / f"{name}1", tmp_path / f"{name}2") if (tmp_path / f"{name}1").exists() else []
        if outs[0] != outs[1]:
            diffs.append("stdout")
        return diffs

    ds = tmp_path / "ds"
    main(["gen-data", "--out", str(ds), "--n-train", "8", "--n-test", "4", "--size", "32", "--seed", "5"])
    common = ["--epochs", "2", "--set", "base_channels=2"]
    results = {
        "gen-data": twice("gen", lambda o: ["gen-data", "--out", o, "--n-train", "8", "--n-test", "4", "--size", "32", "--seed", "5"]),
        "train": twice("train", lambda o: ["train", "--dataset", ds, "--seed", "1", "--run-dir", o, *common]),
    }
    ckpt = tmp_path / "train1" / "model.mshn"
    results["eval"] = twice("eval", lambda o: ["eval", "--checkpoint", ckpt, "--dataset", ds, "--out", o / "eval.json"])
    results["ablate"] = twice(
        "ablate", lambda o: ["ablate", "--dataset", ds, "--vary", "loss=iou,sls", "--seeds", "0", "--out", o, *common]
    )
    results["report"] = twice("report", lambda o: ["report", tmp_path / "ablate1", "--out", o])
    results["grad-check"] = twice("gc", lambda o: ["grad-check", "--trials", "3", "--suite", "sls_loss"])
    ok = not any(results.values())
    detail = ", ".join(f"{k}: {'identical' if not v else 'differs in ' + ' '.join(v)}" for k, v in results.items())
    announce(8, ok, detail)
    assert ok

import json
from pathlib import Path

import numpy as np
import pytest

from slslab.cli import main
from slslab.harness import train as train_mod
from slslab.harness.ablation import ablate, config_matrix, preset_matrix
from slslab.harness.config import (
    ConfigError,
    TrainConfig,
    apply_overrides,
    config_digest,
    dump_config,
    load_config,
    parse_config_text,
)
from slslab.harness.optim import AdagradState, adagrad_step
from slslab.harness.report import emit_report, load_records, location_grid, scale_weight_grid
from slslab.harness.train import DivergenceError, RunRecord, train
from slslab.synth import SceneConfig, generate_dataset
from slslab.tensor import NonFiniteError, Tensor


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_dataset(SceneConfig(size=(32, 32), seed=11), 12, 4, root)
    return root


def cfg_for(toy, **kw):
    return TrainConfig(**{"dataset": str(toy), "base_channels": 2, "epochs": 2, **kw})


# -- config -----------------------------------------------------------------


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(loss="iou", epochs=3, seeds=(1, 2), instance_norm=False, lr=0.01)
    (tmp_path / "c.cfg").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.cfg") == cfg


def test_config_comments_dashes_and_overrides():
    vals = parse_config_text("# comment\nbatch-size = 2  # trailing\n\nloss = dice\n")
    assert vals == {"batch_size": 2, "loss": "dice"}
    cfg = apply_overrides(TrainConfig(**vals), {"epochs": "5", "instance_norm": "off"})
    assert (cfg.epochs, cfg.instance_norm, cfg.batch_size) == (5, False, 2)


@pytest.mark.parametrize(
    "text",
    ["nonsense = 1", "epochs = many", "loss = mse", "batch_size = 0", "supervised_scales = 5", "no equals sign",
     "loss = iou\nlocation = L1", "threshold = 1.0"],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        TrainConfig(**parse_config_text(text))


def test_digest_ignores_paths_and_seed_lists():
    a = TrainConfig(dataset="x", out_dir="y", seeds=(0,))
    b = TrainConfig(dataset="z", out_dir="w", seeds=(4, 5))
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(a.replace(lr=0.01))


# -- optimizer --------------------------------------------------------------


def test_adagrad_matches_hand_accumulation():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    t = Tensor(np.zeros(3), requires_grad=True)
    state = AdagradState.for_params({"t": t}, initial=0.1)
    acc, ref = np.full(3, 0.1), np.zeros(3)
    for g in grads:
        t.grad = g.copy()
        adagrad_step({"t": t}, state, 0.05, 1e-10)
        acc += g * g
        ref -= 0.05 * g / (np.sqrt(acc) + 1e-10)
    assert np.allclose(t.data, ref, rtol=0, atol=1e-15)


def test_adagrad_rejects_bad_gradients():
    t = Tensor(np.zeros(2), requires_grad=True)
    t.grad = np.array([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        adagrad_step({"t": t}, AdagradState(), 0.05)
    assert not t.data.any()
    t.grad = np.zeros(3)
    with pytest.raises(ValueError):
        adagrad_step({"t": t}, AdagradState(), 0.05)


def test_adagrad_skips_parameters_without_gradient():
    t = Tensor(np.ones(2), requires_grad=True)
    adagrad_step({"t": t}, AdagradState(), 0.05)
    assert t.data.tolist() == [1.0, 1.0]


# -- training ---------------------------------------------------------------


def test_record_contents(toy, tmp_path):
    rec = train(cfg_for(toy, loss="sls"), 3, run_dir=tmp_path)
    assert rec.status == "ok" and len(rec.history) == 2
    assert set(rec.history[0]["scales"]) == {"p1", "p2", "p3", "p4", "p"}
    for name in ("record.json", "model.mshn", "buckets.csv", "timing.json"):
        assert (tmp_path / name).exists()
    back = RunRecord.load(tmp_path)
    assert back == rec
    assert back.eval_report().iou == rec.report["iou"]


def test_partial_supervision_records_only_supervised_scales(toy, tmp_path):
    rec = train(cfg_for(toy, supervised_scales=1, epochs=1), 0, run_dir=tmp_path)
    assert set(rec.history[0]["scales"]) == {"p4", "p"}


def test_divergence_keeps_partial_history(toy, tmp_path, monkeypatch):
    calls = {"n": 0}
    real = train_mod.adagrad_step

    def flaky(params, state, lr, eps):
        calls["n"] += 1
        if calls["n"] > 4:  # second epoch of a 12-image set in batches of 4
            raise NonFiniteError("non-finite gradient for parameter fuse.weight")
        real(params, state, lr, eps)

    monkeypatch.setattr(train_mod, "adagrad_step", flaky)
    with pytest.raises(DivergenceError) as err:
        train(cfg_for(toy, epochs=3), 0, run_dir=tmp_path)
    rec = err.value.record
    assert rec.status == "diverged" and len(rec.history) == 1
    assert RunRecord.load(tmp_path).status == "diverged"
    assert not (tmp_path / "model.mshn").exists()


def test_reuse_skips_matching_run(toy, tmp_path, monkeypatch):
    cfg = cfg_for(toy, epochs=1)
    first = train(cfg, 0, run_dir=tmp_path)
    monkeypatch.setattr(train_mod, "forward", lambda *a: pytest.fail("retrained"))
    assert train(cfg, 0, run_dir=tmp_path, reuse=True) == first


def test_missing_dataset_writes_nothing(tmp_path):
    from slslab.synth import DatasetError

    with pytest.raises(DatasetError):
        train(TrainConfig(dataset=str(tmp_path / "absent")), 0, run_dir=tmp_path / "run")
    assert not (tmp_path / "run").exists()


def test_warmup_uses_iou_then_configured_loss(toy, tmp_path, monkeypatch):
    kinds = []
    real = train_mod.batch_loss

    def spy(out, masks, config, kind=None):
        if kind is not None:  # evaluation passes use the configured loss
            kinds.append(kind)
        return real(out, masks, config, kind)

    monkeypatch.setattr(train_mod, "batch_loss", spy)
    train(cfg_for(toy, epochs=2, warmup_epochs=1), 0, run_dir=tmp_path)
    assert kinds[:3] == ["iou"] * 3 and kinds[3:] == ["sls"] * 3


# -- ablation and report ----------------------------------------------------


def test_failed_member_is_marked_and_others_proceed(toy, tmp_path):
    good = cfg_for(toy, epochs=1)
    bad = good.replace(dataset=str(tmp_path / "missing"))
    table = ablate([("good", good), ("bad", bad)], [0], tmp_path / "abl")
    assert table.row("good").runs[0]["status"] == "ok"
    assert table.row("bad").runs[0]["status"].startswith("failed")
    assert table.row("bad").stats["iou"]["median"] is None
    assert (tmp_path / "abl" / "table.csv").exists()


def test_config_matrix_needs_two_rows():
    with pytest.raises(ValueError):
        config_matrix(TrainConfig(), "loss", ["iou"])
    labels = [label for label, _ in preset_matrix(TrainConfig(), "scales")]
    assert labels == [f"supervised_scales={k}" for k in range(5)]


def test_report_files(toy, tmp_path):
    ablate(preset_matrix(cfg_for(toy, epochs=1), "location"), [0], tmp_path / "runs")
    written = emit_report(load_records([tmp_path / "runs"]), tmp_path / "rep")
    names = {p.name for p in written}
    assert names == {"runs.json", "comparison.csv", "loss_curves.txt", "scale_weight_grid.txt", "location_grid.txt"}
    assert len(json.loads((tmp_path / "rep" / "runs.json").read_text())) == 3
    grid = (tmp_path / "rep" / "scale_weight_grid.txt").read_text().splitlines()
    assert grid[0].split() == ["pred_pixels", "gt_pixels", "scale_p", "scale_gt", "w"] and len(grid) == 1 + 100 * 100


def test_weight_grid_shape():
    rows = {(p, g): w for p, g, _, _, w in scale_weight_grid()}
    for p in range(1, 101):
        assert rows[(p, p)] == 1.0
        row = [rows[(p, p * r)] for r in range(1, 101) if p * r <= 100]
        assert all(b < a for a, b in zip(row, row[1:]))


def test_location_grid_bounded():
    rows = location_grid()
    assert all(0.0 <= polar <= 2.0 for _, _, polar, _, _ in rows)
    assert all(polar > 0 for dx, dy, polar, _, _ in rows if (dx, dy) != (0, 0))


# -- command line -----------------------------------------------------------


def run_cli(*args):
    return main([str(a) for a in args])


def test_cli_usage_errors_exit_2(capsys):
    for argv in (["bogus"], ["train", "--nope"], []):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2
    assert run_cli("train", "--dataset", "x", "--set", "unknown=1") == 2


def test_cli_end_to_end(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert run_cli("gen-data", "--out", ds, "--n-train", 8, "--n-test", 4, "--size", 32, "--seed", 2) == 0
    assert run_cli("train", "--dataset", ds, "--epochs", 1, "--seed", 3, "--set", "base_channels=2",
                   "--run-dir", tmp_path / "run") == 0
    ckpt = tmp_path / "run" / "model.mshn"
    assert run_cli("eval", "--checkpoint", ckpt, "--dataset", ds, "--out", tmp_path / "ev.json") == 0
    rep = json.loads((tmp_path / "ev.json").read_text())
    assert rep == RunRecord.load(tmp_path / "run").report
    assert run_cli("eval", "--checkpoint", ckpt, "--dataset", ds, "--thresholds", "0.3,0.5,0.7",
                   "--out", tmp_path / "sweep.json") == 0
    fas = [r["fa"] for r in json.loads((tmp_path / "sweep.json").read_text())]
    assert fas == sorted(fas, reverse=True)
    assert run_cli("ablate", "--dataset", ds, "--vary", "loss=iou,dice", "--seeds", "0,1", "--epochs", 1,
                   "--set", "base_channels=2", "--out", tmp_path / "abl") == 0
    assert len(list((tmp_path / "abl").rglob("record.json"))) == 4
    assert run_cli("report", tmp_path / "abl", "--out", tmp_path / "rep") == 0
    assert (tmp_path / "rep" / "comparison.csv").read_text().count("\n") == 3


def test_cli_eval_size_mismatch_is_an_error(tmp_path):
    ds = tmp_path / "ds"
    run_cli("gen-data", "--out", ds, "--n-train", 2, "--n-test", 2, "--size", 32)
    from slslab.mshnet import UNetConfig, build, save_checkpoint

    save_checkpoint(build(UNetConfig(input_size=(16, 16), base_channels=1)), tmp_path / "m.mshn")
    assert run_cli("eval", "--checkpoint", tmp_path / "m.mshn", "--dataset", ds) == 1


def test_cli_ingest(tmp_path):
    from slslab.synth import write_pgm

    for d in ("i", "m"):
        (tmp_path / d).mkdir()
        for k in range(5):
            write_pgm(tmp_path / d / f"{k}.pgm", np.zeros((8, 8), dtype=np.uint8))
    assert run_cli("gen-data", "--out", tmp_path / "o", "--from-images", tmp_path / "i",
                   "--from-masks", tmp_path / "m") == 0
    assert run_cli("gen-data", "--out", tmp_path / "o2", "--from-images", tmp_path / "i") == 2
    assert Path(tmp_path / "o" / "manifest.json").exists()

"""Training and evaluation runs with on-disk run records."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..losses import LossBreakdown, multiscale_sls, supervised_indices
from ..metrics import EvalReport, binarize, bucketed_eval
from ..mshnet import ModelParams, build, forward, load_checkpoint, save_checkpoint
from ..synth import DatasetManifest
from ..tensor import NonFiniteError, Tensor, backward, no_grad
from .config import TrainConfig
from .optim import AdagradState, adagrad_step

log = logging.getLogger(__name__)

RECORD_VERSION = 1
RECORD_FILE = "record.json"
CHECKPOINT_FILE = "model.mshn"
PRED_NAMES = ("p1", "p2", "p3", "p4", "p")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class RunRecord:
    config: dict
    seed: int
    dataset_hash: str | None
    initial_loss: float
    history: tuple[dict, ...]
    report: dict | None
    checkpoint: str | None
    status: str = "ok"
    message: str = ""

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else self.initial_loss

    def to_json(self) -> str:
        d = asdict(self)
        d["history"] = list(self.history)
        d["version"] = RECORD_VERSION
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> RunRecord:
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_FILE
        d = json.loads(path.read_text())
        if d.pop("version", None) != RECORD_VERSION:
            raise ValueError(f"{path}: unsupported run record version")
        d["history"] = tuple(d["history"])
        return cls(**d)

    def eval_report(self) -> EvalReport | None:
        return None if self.report is None else EvalReport.from_dict(self.report)


def run_name(config: TrainConfig, seed: int) -> str:
    loc = f"-{config.location}" if config.loss == "sls" else ""
    return f"{config.loss}{loc}-k{config.supervised_scales}-seed{seed}"


def batch_loss(
    outputs, masks: np.ndarray, config: TrainConfig, kind: str | None = None
) -> tuple[Tensor, list[list[LossBreakdown]]]:
    """Mean over images of the multi-scale loss; also returns per-image breakdowns."""
    kind = kind or config.loss
    preds = outputs.as_tuple()
    total = None
    parts = []
    for n in range(masks.shape[0]):
        loss, bd = multiscale_sls(
            [p[n, 0] for p in preds],
            masks[n],
            num_side=config.supervised_scales,
            kind=kind,
            location=config.location,
            variance=config.variance,
        )
        total = loss if total is None else total + loss
        parts.append(bd)
    return total / float(masks.shape[0]), parts


def _mean_loss(params: ModelParams, images, masks, config: TrainConfig, batch: int = 8) -> float:
    vals = []
    with no_grad():
        for i in range(0, len(images), batch):
            out = forward(params, Tensor(images[i : i + batch, None]))
            loss, _ = batch_loss(out, masks[i : i + batch], config)
            vals.append(loss.item() * len(images[i : i + batch]))
    return float(sum(vals) / len(images))


def predict(params: ModelParams, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Fused probability maps, N x H x W."""
    outs = []
    with no_grad():
        for i in range(0, len(images), batch):
            outs.append(forward(params, Tensor(images[i : i + batch, None])).p.data[:, 0])
    return np.concatenate(outs, axis=0)


def evaluate(
    params: ModelParams,
    images: np.ndarray,
    masks: np.ndarray,
    threshold: float = 0.5,
    match_dist: float = 3.0,
    exclude_matched_fa: bool = False,
) -> EvalReport:
    probs = predict(params, images)
    binary = [binarize(p, threshold) for p in probs]
    return bucketed_eval(binary, list(masks), match_dist, exclude_matched_fa, threshold=threshold)


def evaluate_checkpoint(checkpoint, dataset, threshold: float = 0.5, split: str = "test", match_dist: float = 3.0) -> EvalReport:
    params = load_checkpoint(checkpoint)
    manifest = DatasetManifest.load(dataset)
    images, masks = manifest.load_split(split)
    if tuple(images.shape[1:]) != params.config.input_size:
        raise ValueError(f"dataset images {images.shape[1:]} do not match model input {params.config.input_size}")
    return evaluate(params, images, masks, threshold, match_dist)


def _epoch_summary(epoch: int, loss_sum: float, count: int, parts_acc: dict) -> dict:
    scales = {}
    for name, acc in parts_acc.items():
        n = acc["n"]
        scales[name] = {
            "total": acc["total"] / n,
            "scale": acc["scale"] / n,
            "location": acc["location"] / n,
            "weight": acc["weight"] / acc["nw"] if acc["nw"] else None,
        }
    return {"epoch": epoch, "loss": loss_sum / count, "scales": scales}


def train(
    config: TrainConfig,
    seed: int | None = None,
    run_dir=None,
    reuse: bool = False,
) -> RunRecord:
    """Train one model and persist ``record.json`` and ``model.mshn`` in ``run_dir``.

    The data order of epoch ``e`` is a permutation drawn from ``(seed, e)``;
    the last partial batch is kept.  Wall time goes to ``timing.json`` so the
    record itself stays byte-reproducible.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    if not config.dataset:
        raise FileNotFoundError("no dataset configured")
    manifest = DatasetManifest.load(config.dataset)
    images, masks = manifest.load_split("train")
    test_images, test_masks = manifest.load_split("test")

    run_dir = Path(run_dir) if run_dir is not None else Path(config.out_dir) / run_name(config, seed)
    snapshot = config.training_snapshot()
    if reuse and (run_dir / RECORD_FILE).exists():
        try:
            old = RunRecord.load(run_dir)
            if old.config == snapshot and old.seed == seed and old.status == "ok" and old.dataset_hash == manifest.dataset_hash:
                return old
        except (ValueError, KeyError, json.JSONDecodeError):
            pass

    started = time.perf_counter()
    params = build(config.model_config(tuple(images.shape[1:]), seed))
    state = AdagradState.for_params(params.tensors, config.initial_accumulator)
    initial = _mean_loss(params, images, masks, config)
    names = [PRED_NAMES[i - 1] for i in supervised_indices(config.supervised_scales)] + ["p"]

    history: list[dict] = []
    status, message = "ok", ""
    n = len(images)
    try:
        for epoch in range(config.epochs):
            kind = "iou" if epoch < config.warmup_epochs else config.loss
            order = np.random.default_rng([seed, epoch]).permutation(n)
            loss_sum = 0.0
            acc = {k: {"n": 0, "nw": 0, "total": 0.0, "scale": 0.0, "location": 0.0, "weight": 0.0} for k in names}
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                out = forward(params, Tensor(images[idx, None]))
                loss, parts = batch_loss(out, masks[idx], config, kind)
                params.zero_grad()
                backward(loss)
                adagrad_step(params.tensors, state, config.lr, config.eps)
                loss_sum += loss.item() * len(idx)
                for per_image in parts:
                    for name, bd in zip(names, per_image):
                        a = acc[name]
                        a["n"] += 1
                        a["total"] += bd.total.item()
                        a["scale"] += bd.scale_term.item()
                        a["location"] += bd.location_term.item()
                        if bd.weight is not None:
                            a["nw"] += 1
                            a["weight"] += bd.weight
            summary = _epoch_summary(epoch + 1, loss_sum, n, acc)
            history.append(summary)
            log.info("seed %d epoch %d loss %.5f", seed, epoch + 1, summary["loss"])
    except NonFiniteError as exc:
        status, message = "diverged", f"epoch {len(history) + 1}: {exc}"

    run_dir.mkdir(parents=True, exist_ok=True)
    report = None
    checkpoint = None
    if status == "ok":
        save_checkpoint(params, run_dir / CHECKPOINT_FILE)
        checkpoint = CHECKPOINT_FILE
        rep = evaluate(params, test_images, test_masks, config.threshold, config.match_dist)
        report = rep.to_dict()
        (run_dir / "buckets.csv").write_text(rep.bucket_csv())
    record = RunRecord(
        config=snapshot,
        seed=seed,
        dataset_hash=manifest.dataset_hash,
        initial_loss=initial,
        history=tuple(history),
        report=report,
        checkpoint=checkpoint,
        status=status,
        message=message,
    )
    (run_dir / RECORD_FILE).write_text(record.to_json())
    (run_dir / "timing.json").write_text(json.dumps({"wall_seconds": time.perf_counter() - started}) + "\n")
    if status != "ok":
        raise DivergenceError(message, record)
    return record

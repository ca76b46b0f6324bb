"""Command line entry point: ``slslab <command> ...``.

Commands: gen-data, train, eval, ablate, grad-check, report.  Exit status is 0
on success, 1 on a runtime error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck
from .harness import ablation, report
from .harness.config import ConfigError, load_config
from .harness.train import evaluate_checkpoint, run_name, train
from .synth import SceneConfig, generate_dataset, ingest_external


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--dataset", help="dataset directory (with manifest.json)")
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--loss", choices=("iou", "dice", "scale", "sls"))
    p.add_argument("--location", choices=("polar", "L1", "L2"))
    p.add_argument("--scales", dest="supervised_scales", type=int, help="supervised side scales, 0..4")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--set", action="append", type=_key_value, default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _train_config(args):
    overrides = dict(args.set)
    for key in ("dataset", "out_dir", "loss", "location", "supervised_scales", "epochs", "batch_size", "lr", "threshold"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = str(args.seed)
    if getattr(args, "seeds", None) is not None:
        overrides["seeds"] = args.seeds
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    if args.from_images or args.from_masks:
        if not (args.from_images and args.from_masks):
            raise ConfigError("--from-images and --from-masks go together")
        manifest = ingest_external(args.from_images, args.from_masks, args.split, args.seed, args.out)
        print(f"indexed {len(manifest.samples)} pairs, skipped {len(manifest.skipped)} -> {args.out}/manifest.json")
        return 0
    size = tuple(args.size) if len(args.size) == 2 else (args.size[0], args.size[0])
    cfg = SceneConfig(
        size=size,
        targets_per_image=tuple(args.targets),
        scale_mix=tuple(args.scale_mix),
        noise_std=args.noise_std,
        seed=args.seed,
    )
    manifest = generate_dataset(cfg, args.n_train, args.n_test, args.out)
    print(f"wrote {len(manifest.samples)} samples to {args.out} (hash {manifest.dataset_hash[:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or dataset = ... in the config)")
    seed = cfg.seeds[0]
    record = train(cfg, seed, run_dir=args.run_dir)
    rep = record.report or {}
    run_dir = args.run_dir or Path(cfg.out_dir) / run_name(cfg, seed)
    print(f"run {run_dir}: final loss {record.final_loss:.5f}  IoU {rep.get('iou')}  Pd {rep.get('pd')}  Fa {rep.get('fa')}")
    return 0


def cmd_eval(args) -> int:
    thresholds = args.thresholds or [args.threshold]
    results = []
    for t in thresholds:
        rep = evaluate_checkpoint(args.checkpoint, args.dataset, t, args.split, args.match_dist)
        results.append(rep)
        print(f"threshold {t:g}: IoU {rep.iou:.4f}  Pd {rep.pd}  Fa {rep.fa:.3e}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = results[0].to_dict() if len(results) == 1 else [r.to_dict() for r in results]
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args)
    if args.preset:
        matrix = ablation.preset_matrix(base, args.preset)
    elif args.vary:
        key, values = args.vary
        matrix = ablation.config_matrix(base, key, [v for v in values.split(",") if v])
    else:
        raise ConfigError("ablate needs --preset or --vary")
    table = ablation.ablate(matrix, base.seeds, args.out_dir or base.out_dir, reuse=not args.fresh)
    sys.stdout.write(table.to_csv())
    return 0


def cmd_grad_check(args) -> int:
    names = args.suite or list(gradcheck.SUITES)
    worst = 0.0
    for name in names:
        err = gradcheck.run_suite(name, args.trials, args.seed)
        worst = max(worst, err)
        print(f"{name:24s} max rel. error {err:.3e}")
    ok = worst < gradcheck.TOLERANCE
    print(f"overall max rel. error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {gradcheck.TOLERANCE:g})")
    return 0 if ok else 1


def cmd_report(args) -> int:
    records = report.load_records(args.runs)
    if not records:
        raise FileNotFoundError("no run records found")
    for p in report.emit_report(records, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset or index an external one")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, nargs="+", default=[64])
    p.add_argument("--targets", type=int, nargs=2, default=[1, 3], metavar=("MIN", "MAX"))
    p.add_argument("--scale-mix", type=_floats, default=[1 / 3, 1 / 3, 1 / 3])
    p.add_argument("--noise-std", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-images", help="directory of external images")
    p.add_argument("--from-masks", help="directory of external masks")
    p.add_argument("--split", default="4:1", choices=("4:1", "1:1"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_train_options(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-dir", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--thresholds", type=_floats, help="comma-separated sweep")
    p.add_argument("--split", default="test")
    p.add_argument("--match-dist", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a configuration matrix over seeds")
    _add_train_options(p)
    p.add_argument("--preset", choices=sorted(ablation.PRESETS))
    p.add_argument("--vary", type=_key_value, metavar="KEY=V1,V2,...")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--seed", type=int, help="single seed")
    p.add_argument("--fresh", action="store_true", help="retrain even when a matching record exists")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", action="append", choices=sorted(gradcheck.SUITES))
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="write report and plot-data files from run records")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except (OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

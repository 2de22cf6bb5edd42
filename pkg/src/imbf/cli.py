"""Command-line entry point: one subcommand per pipeline stage.

    imbf split    --root data/ --ratios 0.8,0.1,0.1 --seed 7 --out manifest.csv
    imbf plan     --manifest manifest.csv --strategy double-below-mean --out plan.json
    imbf augment  --manifest manifest.csv --plan plan.json --out-dir aug/ --out manifest_aug.csv
    imbf train    --manifest manifest_aug.csv --task binary --out binary.ckpt
    imbf train    --manifest manifest_aug.csv --task multi --init from=binary.ckpt --out multi.ckpt
    imbf evaluate --ckpt multi.ckpt --manifest manifest.csv --split test --out report.json
    imbf report   --compare a.json b.json --out delta.json
    imbf scale    --alpha 1.2 --beta 1.1 --gamma 1.15 --phi 1

Exit codes: 0 success, 1 internal error, 2 invalid input, 3 strict
constraint failure. ``--config file.json`` supplies defaults for any flag;
explicit flags win. Every command writes its resolved configuration to
``<out>.config.json``. Logging goes to stderr, level from ``IMBF_LOG``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import dataset, nn, rebalance, train
from .augment import INTENSIVE
from .metrics import ClassificationReport, MetricsError, compare_reports

log = logging.getLogger("imbf")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_STRICT = 0, 1, 2, 3


class InputError(Exception):
    pass


def _write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))


def _write_resolved(args: argparse.Namespace, out: str) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    _write_text(f"{out}.config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in str(text).split(","))
    except ValueError:
        raise InputError(f"ratios must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise InputError(f"ratios must be three comma-separated numbers, got {text!r}")
    return parts


def _on_off(text: str) -> bool:
    if text in (True, False):
        return text
    if text not in ("on", "off"):
        raise InputError(f"expected on|off, got {text!r}")
    return text == "on"


# --------------------------------------------------------------------------
# commands


def cmd_split(args: argparse.Namespace) -> int:
    ratios = _ratios(args.ratios)
    manifest = dataset.scan_directory(args.root, args.layout)
    manifest = dataset.stratified_split(manifest, ratios, args.seed)
    problems = dataset.validate_manifest(manifest)
    if problems:
        for p in problems:
            log.error("%s", p)
        return EXIT_INPUT
    dataset.write_manifest(manifest, args.out)
    _write_resolved(args, args.out)
    log.info("wrote %d entries to %s", len(manifest), args.out)
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    manifest = dataset.read_manifest(args.manifest)
    counts = rebalance.class_counts(manifest, dataset.Split.TRAIN, args.level)
    if args.strategy == "double-below-mean":
        plan = rebalance.build_plan(counts, rebalance.DOUBLE_BELOW_MEAN, args.seed)
    elif args.strategy.startswith("targets="):
        targets = json.loads(Path(args.strategy[len("targets="):]).read_text(encoding="utf-8"))
        plan = rebalance.build_plan(counts, rebalance.EXPLICIT_TARGETS, args.seed, targets)
    else:
        raise InputError(f"--strategy must be double-below-mean or targets=<file>, got {args.strategy!r}")
    _write_text(args.out, plan.to_json())
    _write_resolved(args, args.out)
    log.info("plan: %d -> %d training images", sum(counts.values()), plan.total)
    return EXIT_OK


def cmd_augment(args: argparse.Namespace) -> int:
    manifest = dataset.read_manifest(args.manifest)
    plan = rebalance.RebalancePlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
    result = rebalance.materialize(plan, manifest, INTENSIVE, args.out_dir, jobs=args.jobs)
    dataset.write_manifest(result, args.out)
    _write_resolved(args, args.out)
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> train.TrainConfig:
    init, ckpt = "fresh", None
    if args.init.startswith("from="):
        init, ckpt = "checkpoint", args.init[len("from="):]
    elif args.init != "fresh":
        raise InputError(f"--init must be fresh or from=<ckpt>, got {args.init!r}")
    return train.TrainConfig(
        task=args.task,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        policy=args.policy,
        use_class_weights=_on_off(args.class_weights),
        init=init,
        init_checkpoint=ckpt,
        resolution=args.resolution,
        channels=args.channels,
        dropout=args.dropout,
    )


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    manifest = dataset.read_manifest(args.manifest)
    result = train.fit(config, manifest)
    train.save_checkpoint(result.checkpoint, args.out)
    _write_text(args.log or f"{args.out}.epochs.jsonl", result.log_jsonl())
    _write_resolved(args, args.out)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = train.load_checkpoint(args.ckpt)
    manifest = dataset.read_manifest(args.manifest)
    split = {"train": "Train", "val": "Val", "test": "Test"}.get(args.split.lower(), args.split)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    report = train.evaluate(ckpt, manifest, split, config=resolved)
    _write_text(args.out, report.to_json())
    if args.confusion_csv:
        _write_text(args.confusion_csv, report.confusion.to_csv())
    _write_resolved(args, args.out)
    log.info("\n%s", report.display())
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    a_path, b_path = args.compare
    a = ClassificationReport.from_json(Path(a_path).read_text(encoding="utf-8"))
    b = ClassificationReport.from_json(Path(b_path).read_text(encoding="utf-8"))
    deltas = compare_reports(a, b)
    _write_text(args.out, json.dumps(deltas, indent=2) + "\n")
    _write_resolved(args, args.out)
    return EXIT_OK


def cmd_scale(args: argparse.Namespace) -> int:
    r = nn.compound_scale(args.alpha, args.beta, args.gamma, args.phi, args.tolerance)
    verdict = "OK" if r.constraint_ok else "VIOLATED"
    print(f"depth x{r.depth_mult:.6g}  width x{r.width_mult:.6g}  resolution x{r.resolution_mult:.6g}")
    print(f"alpha*beta^2*gamma^2 = {r.constraint_value:.6g} (target 2 +/- {args.tolerance:g}): {verdict}")
    if args.strict and not r.constraint_ok:
        return EXIT_STRICT
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imbf", description="Class-imbalance-aware image classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    def command(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with defaults for any flag")
        p.set_defaults(func=func)
        parser.commands[name] = p
        return p

    p = command("split", cmd_split, "scan an image tree and assign stratified splits")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", default="subclass-per-dir", choices=[l.value for l in dataset.Layout])
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("plan", cmd_plan, "build a rebalancing plan from training counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", default="double-below-mean", help="double-below-mean | targets=<file.json>")
    p.add_argument("--level", default="subclass", choices=["subclass", "coarse"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("augment", cmd_augment, "materialize intensive copies for a plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", required=True, help="path of the updated manifest")
    p.add_argument("--jobs", type=int, default=1)

    p = command("train", cmd_train, "train a classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", default="multi", choices=["binary", "multi"])
    p.add_argument("--init", default="fresh", help="fresh | from=<checkpoint>")
    p.add_argument("--policy", default="l2", choices=["l1", "l2", "l3", "none"])
    p.add_argument("--class-weights", default="on", choices=["on", "off"])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--channels", type=int, default=3, choices=[1, 3])
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="epoch log path (default <out>.epochs.jsonl)")

    p = command("evaluate", cmd_evaluate, "evaluate a checkpoint on a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--confusion-csv")

    p = command("report", cmd_report, "compare two evaluation reports")
    p.add_argument("--compare", nargs=2, required=True, metavar=("A", "B"))
    p.add_argument("--out", required=True)

    p = command("scale", cmd_scale, "compound scaling multipliers and constraint check")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--tolerance", type=float, default=nn.CONSTRAINT_TOLERANCE)
    p.add_argument("--strict", action="store_true")
    return parser


def _config_defaults(argv: list[str]) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    doc = json.loads(Path(known.config).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise InputError(f"{known.config}: config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def _setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}.get(
        os.environ.get("IMBF_LOG", "warn").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        defaults = _config_defaults(argv)
        if defaults and argv:
            sub = parser.commands.get(argv[0])
            if sub is not None:
                for action in sub._actions:
                    if action.dest in defaults:
                        action.required = False
                sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (InputError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    try:
        return args.func(args)
    except train.TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_INTERNAL
    except (InputError, OSError, ValueError, MetricsError, train.TrainingError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

One executable, six subcommands: ``gen-data``, ``pretrain``,
``finetune``, ``eval``, ``experiment``, ``overlay``.  All commands read
the same single-document JSON config (sections ``arch``, ``train``,
``loss``, ``policy``, ``experiment``); flags never duplicate config
fields except where a flag is the natural unit of variation (fraction,
seeds, paths).

Exit codes: 0 success, 1 invalid input/config/data, 2 numeric or
unexpected runtime failure.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CheckpointError, NumericError, SolarSegError, ValidationError
from .harness import (
    ExperimentRunner,
    domain_from_doc,
    experiment_from_config,
    export_overlay,
    materialize_dataset,
    train_config_from_doc,
)
from .imagery import CorruptionSpec, load_dataset, load_image, load_mask, subset
from .model import ArchConfig, load_checkpoint, save_checkpoint
from .train import evaluate, finetune, pretrain


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit(2)."""

    def error(self, message):
        raise ValidationError(f"arguments: {message}")


def _read_json(path: str, label: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{label}: file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{label}: invalid JSON ({exc})") from exc


def _load_config(path: str):
    doc = _read_json(path, "config")
    try:
        arch = ArchConfig(**doc.get("arch", {})).validate()
    except TypeError as exc:
        raise ValidationError(f"arch: {exc}") from exc
    train = train_config_from_doc(doc)
    return doc, arch, train


def _stage_epochs(doc: dict, train_epochs: int, stage: str) -> int:
    exp = doc.get("experiment", {})
    return int(exp.get(f"{stage}_epochs", train_epochs))


def _cmd_gen_data(args) -> int:
    doc = _read_json(args.spec, "spec")
    corruption = doc.pop("corruption", None)
    if corruption is not None:
        try:
            corruption = CorruptionSpec(**corruption).validate()
        except TypeError as exc:
            raise ValidationError(f"corruption: {exc}") from exc
    domain = domain_from_doc(doc)
    manifest = materialize_dataset(domain, args.out, args.seed, corruption)
    n = sum(len(v) for v in manifest.splits.values())
    print(f"gen-data: wrote {n} tiles for domain {manifest.name!r} to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    doc, arch, train_cfg = _load_config(args.config)
    train_cfg = replace(train_cfg, epochs=_stage_epochs(doc, train_cfg.epochs, "pretrain"))
    dataset = load_dataset(args.data)
    params, history = pretrain(dataset, arch, train_cfg)
    save_checkpoint(params, arch, args.out)
    _write_history_lines(history, Path(args.out).with_suffix(".history.jsonl"))
    print(f"pretrain: {len(history.epochs)} epochs, final loss "
          f"{history.epochs[-1]['loss']:.6f}, checkpoint {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    doc, arch, train_cfg = _load_config(args.config)
    train_cfg = replace(train_cfg, epochs=_stage_epochs(doc, train_cfg.epochs, "finetune"))
    dataset = load_dataset(args.data)
    sub = subset(dataset, args.fraction, args.subset_seed)
    init = None
    if args.init != "random":
        init, _ = load_checkpoint(args.init)
    best, history = finetune(sub, arch, train_cfg, init=init)
    save_checkpoint(best, arch, args.out)
    _write_history_lines(history, Path(args.out).with_suffix(".history.jsonl"))
    best_iou = "n/a" if history.best_val_iou is None else f"{history.best_val_iou:.6f}"
    print(f"finetune: {len(history.epochs)} epochs, best val IoU {best_iou}, "
          f"checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = evaluate(params, dataset, args.split, args.threshold)
    report.save(args.report)
    print(f"eval: split {args.split}, IoU {report.iou:.6f}, report {args.report}")
    return 0


def _cmd_experiment(args) -> int:
    doc = _read_json(args.spec, "spec")
    spec = experiment_from_config(doc)
    runner = ExperimentRunner(spec, args.out_dir, jobs=args.jobs)
    report = runner.run()
    print(f"experiment: {spec.kind}, {len(report.rows)} rows, "
          f"{runner.pretrain_runs} pretrain runs, reports in {args.out_dir}")
    return 0


def _cmd_overlay(args) -> int:
    image = load_image(args.image)
    pred = load_mask(args.pred)
    truth = load_mask(args.truth)
    counts = export_overlay(image, pred, truth, args.out)
    print(f"overlay: tp={counts['tp']} fp={counts['fp']} fn={counts['fn']}, wrote {args.out}")
    return 0


def _write_history_lines(history, path: Path) -> None:
    lines = [json.dumps(e) for e in history.epochs]
    lines.append(
        json.dumps(
            {
                "kind": history.kind,
                "best_val_iou": history.best_val_iou,
                "best_epoch": history.best_epoch,
                "wall_ms": history.wall_ms,
            }
        )
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="solarseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize a synthetic dataset")
    p.add_argument("--spec", required=True, help="domain spec JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="config JSON")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--init", default="random", help="checkpoint path or 'random'")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--subset-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["val", "test"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", required=True, help="output JSON report path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("experiment", help="run a full protocol grid")
    p.add_argument("--spec", required=True, help="experiment config JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("overlay", help="write a prediction/truth overlay PNG")
    p.add_argument("--image", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_overlay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ValidationError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except SolarSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))

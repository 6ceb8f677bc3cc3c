"""Command line entry point: synth-gen, derive-gt, train, eval, audit.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .annotations import PanopticDataset, PanopticLabel, TaskKind, ValidationError, derive_task_gt, gt_to_label, write_dataset
from .config import Config, ConfigError
from .gradkernel import FormatError

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides train.seed / generator seed")
    common.add_argument("--task", choices=[t.value for t in TaskKind])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="taskseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic panoptic dataset")
    p.add_argument("--out", type=Path, default=Path("data/train"))
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=None, help="square image extent (default model.image_size)")

    p = sub.add_parser("derive-gt", parents=[common], help="derive task targets from panoptic labels")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--image", help="restrict to one image (file stem)")
    p.add_argument("--out", type=Path, help="write targets in the dataset layout here")

    p = sub.add_parser("train", parents=[common], help="joint task-conditioned training")
    p.add_argument("--data", type=Path, help="training dataset (default data.train)")
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint under one task token")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="evaluation dataset (default data.val)")
    p.add_argument("--out", type=Path, default=Path("runs/eval"))

    p = sub.add_parser("audit", parents=[common], help="panoptic vs external instance annotation report")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--instances", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")
    return parser


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _cmd_synth(args) -> None:
    from .synth import generate_synthetic

    cfg = _config(args)
    size = args.size or cfg.model.image_size
    seed = args.seed if args.seed is not None else cfg.train.seed
    generate_synthetic(seed, args.count, size, size, args.out)
    print(f"wrote {args.count} scenes to {args.out}")


def _cmd_derive(args) -> None:
    task = TaskKind(args.task or "panoptic")
    ds = PanopticDataset(args.data)
    items = []
    for sample in ds:
        if args.image and sample.name != args.image:
            continue
        gt = derive_task_gt(sample.label, ds.classes, task)
        print(f"{sample.name}\t{task.value}\t{len(gt.targets)}\t"
              + ",".join(ds.classes[c].name for c in gt.class_ids))
        if args.out:
            label = gt_to_label(gt, ds.classes) if gt.targets else PanopticLabel(
                np.zeros_like(sample.label.segment_map), [])
            items.append((f"{sample.name}.png", None, label))
    if args.image and not items and not any(s.name == args.image for s in ds):
        raise ValidationError(f"no image named {args.image!r}")
    if args.out:
        write_dataset(args.out, ds.classes, items)


def _cmd_train(args) -> None:
    from .harness import train

    cfg = _config(args)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    data = args.data or (Path(cfg.data.train) if cfg.data.train else None)
    if data is None:
        raise ConfigError("no training data: pass --data or set data.train")
    train(cfg, data, args.out)
    print(f"checkpoint written to {args.out}")


def _cmd_eval(args) -> None:
    from .harness import evaluate

    cfg = _config(args)
    data = args.data or (Path(cfg.data.val) if cfg.data.val else None)
    if data is None:
        raise ConfigError("no evaluation data: pass --data or set data.val")
    task = TaskKind(args.task or "panoptic")
    report = evaluate(args.checkpoint, data, task, args.out)
    print(f"{task.value}: {report['primary']:.4f} (report in {args.out})")


def _cmd_audit(args) -> None:
    from .harness import audit

    findings = audit(args.data, args.instances)
    text = "".join(f.format() + "\n" for f in findings)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"{len(findings)} discrepancies", file=sys.stderr)


COMMANDS = {
    "synth-gen": _cmd_synth,
    "derive-gt": _cmd_derive,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "audit": _cmd_audit,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

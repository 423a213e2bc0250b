"""Command line entry point: ``weakloc <subcommand> [flags]``.

Exit status is 0 on success, 1 for user errors (bad flags, missing files,
invalid config or data) and 2 for numeric or internal failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, GeometryError, NumericError, WeaklocError

log = logging.getLogger("weakloc")

USER_ERRORS = (ConfigError, DataError, GeometryError, FileNotFoundError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _replace(cfg, section, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})


def cmd_synth(args):
    from .pipeline import run_synth

    cfg = _replace(_resolve(args), "data", subjects=args.subjects, frames=args.frames)
    manifest = run_synth(args.out, cfg)
    print(f"wrote {len(manifest)} frames from {len(manifest.subjects)} subjects to {args.out}")


def cmd_preprocess(args):
    from .pipeline import run_preprocess

    cfg = _replace(_resolve(args), "geometry", crop=args.crop, size=args.size)
    manifest = run_preprocess(args.input, args.out, cfg)
    print(f"preprocessed {len(manifest)} frames into {args.out}")


def cmd_train(args):
    from .pipeline import run_train

    cfg = _resolve(args)
    cfg = _replace(cfg, "train", max_epochs=args.epochs)

    def progress(row):
        print(f"epoch {row['epoch']} lr {row['lr']:.4g} loss {row['train_loss']:.4f} "
              f"val_acc {row['val_acc']:.4f}", flush=True)

    _, result = run_train(args.data, args.out, cfg, progress)
    print(f"checkpoint {result.checkpoint} after {result.epochs} epochs")


def cmd_eval(args):
    from .pipeline import run_eval

    cfg = load_config(args.config) if args.config else None
    report = run_eval(args.checkpoint, args.data, args.report, args.split, cfg)
    for k, v in report.summary().items():
        print(f"{k} {v}")
    if report.latency_ms:
        print(f"latency_median_ms {report.latency_ms['median']:.2f}")


def cmd_infer(args):
    from .frames import load_frame
    from .geometry import preprocess
    from .localisation import localise
    from .overlay import render_overlay
    from .training import load_checkpoint
    from .config import from_dict

    network, meta = load_checkpoint(args.checkpoint)
    cfg = from_dict(meta.get("config")) if meta.get("config") else ExperimentConfig()
    frame = load_frame(args.input)
    g = cfg.geometry
    frame = preprocess(frame, g.crop, g.size, g.out_rows, g.out_cols)
    loc = localise(network, frame, cfg.eval.threshold_rule)
    label = cfg.data.classes[loc.label]
    print(f"label {label}")
    print(f"box {loc.box.x0} {loc.box.y0} {loc.box.x1} {loc.box.y1}" + (" degenerate" if loc.degenerate else ""))
    if args.overlay:
        Path(args.overlay).parent.mkdir(parents=True, exist_ok=True)
        render_overlay(frame.pixels, loc.proposal, loc.box, frame.gt_box).save(args.overlay)
        print(f"overlay {args.overlay}")


def cmd_selftest(args):
    from .selftest import run

    failures = run(args.seed or 0)
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="weakloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int)
    s.add_argument("--frames", type=int, help="frames per subject")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="polar projection, crop and resize")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--crop", type=float)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train on a preprocessed dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, help="overrides train.max_epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="classify and localise one frame")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--overlay")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args) or 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WeaklocError, RuntimeError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

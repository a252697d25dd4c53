"""Command-line entry point: ``dynsubnet <command> [options]``.

Errors exit with status 1 and a single ``error: <Type>: <message>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import RunConfig
from .train import train, write_dataset


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    if args.config:
        return RunConfig.load(args.config, **overrides)
    return RunConfig(**overrides)


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out or "data")
    paths = write_dataset(out, cfg)
    print(json.dumps({k: str(p) for k, p in zip(("train", "val", "vocab"), paths)}))


def cmd_train(args):
    cfg = _config(args)
    result = train(cfg)
    print(json.dumps({"run_dir": str(result.run_dir),
                      "checkpoint": str(result.run_dir / "checkpoint"),
                      "final": result.epochs[-1] if result.epochs else None}))


def cmd_eval(args):
    out = args.out or str(Path(args.checkpoint).parent / "eval")
    print(json.dumps(harness.evaluate(args.checkpoint, args.split, out), sort_keys=True))


def cmd_extract(args):
    report = harness.extract(args.checkpoint, args.expression, args.scene_index, args.split,
                             args.repeats)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "extract.json").write_text(text)
    print(text)


def cmd_stats(args):
    out = args.out or str(Path(args.checkpoint).parent / "stats")
    print(json.dumps(harness.stats(args.checkpoint, args.split, out), sort_keys=True))


def cmd_export_gates(args):
    out = args.out or str(Path(args.checkpoint).parent / "stats")
    print(harness.export_gates(args.checkpoint, args.split, out))


def cmd_word_scores(args):
    out = args.out or str(Path(args.checkpoint).parent / "stats")
    scores = harness.export_word_scores(args.checkpoint, args.split, out)
    for word in sorted(scores):
        s = scores[word]
        print(f"{word}\t{s.backbone:.4f}\t{s.interaction:.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynsubnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, checkpoint=False, split=False):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if split:
            sp.add_argument("--split", default="val", choices=("train", "val"))
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data)
    add("train", cmd_train)
    add("eval", cmd_eval, checkpoint=True, split=True)
    ex = add("extract", cmd_extract, checkpoint=True, split=True)
    ex.add_argument("--expression")
    ex.add_argument("--scene-index", type=int, default=0)
    ex.add_argument("--repeats", type=int, default=100)
    add("stats", cmd_stats, checkpoint=True, split=True)
    add("export-gates", cmd_export_gates, checkpoint=True, split=True)
    add("word-scores", cmd_word_scores, checkpoint=True, split=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except Exception as err:  # one parsable line per failure
        msg = str(err).replace("\n", " ")
        print(f"error: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: `accent-tts [--config F] [--seed N] [--out DIR] <command>`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ..lexicon import LexiconError
from .arrays import ArrayFormatError
from .checkpoint import CheckpointError
from .config import ConfigError, build_run_config, parse_config_file, parse_overrides
from .pipeline import STAGES, run_pipeline
from .toy import ToySizes, default_spec, make_toy_corpus

logger = logging.getLogger("accent_tts")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2
# malformed configs, corpora or checkpoints, as opposed to failures inside a stage
VALIDATION_ERRORS = (ConfigError, LexiconError, CheckpointError, ArrayFormatError, FileNotFoundError)


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", type=Path, default=default, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=default, help="random seed (overrides the config)")
    p.add_argument("--out", type=Path, default=default, help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true", default=default or False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accent-tts", description="Accent transfer for G2P and TTS on toy corpora.")
    _global_flags(p, None)
    # the same flags after the subcommand; SUPPRESS keeps values given before it
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("make-toy-corpus", parents=[common], help="write a synthetic accented corpus")
    toy.add_argument("--words", type=int, default=300)
    toy.add_argument("--utts", type=int, nargs="+", default=[40, 40, 40], metavar="N", help="utterances per accent, in spec order")

    for name in STAGES + ("all",):
        sp = sub.add_parser(name, parents=[common], help="run every stage in order" if name == "all" else f"run the {name} stage")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    return p


def _values(args) -> dict:
    values = parse_config_file(args.config) if args.config else {}
    values.update(parse_overrides(getattr(args, "set", [])))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out"] = str(args.out)
    return values


def _make_toy(args) -> dict:
    values = _values(args)
    if values.get("seed") is None:
        raise ConfigError("seed is mandatory")
    target = args.out or (Path(str(values["corpus"])) if values.get("corpus") else None)
    if target is None:
        raise ConfigError("make-toy-corpus needs --out or a corpus key in the config")
    spec = default_spec()
    if len(args.utts) != len(spec.accents):
        raise ConfigError(f"--utts needs {len(spec.accents)} counts ({', '.join(spec.names)})")
    sizes = ToySizes(words=args.words, utterances=dict(zip(spec.names, args.utts)))
    out = make_toy_corpus(spec, sizes, int(values["seed"]), target)
    return {"corpus": str(out), "accents": spec.names, "utterances": sizes.utterances}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-toy-corpus":
            report = _make_toy(args)
        else:
            cfg = build_run_config(_values(args))
            report = run_pipeline(cfg, args.command)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        logger.exception("stage failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(report, indent=1, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``xlingtts VERB [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, apply_overrides
from .corpus import ConfigError

VERBS = ("corpus", "pretrain", "train-h2m", "train-p2h", "synthesize", "evaluate", "ablate", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlingtts",
        description="Cross-lingual style transfer TTS on a synthetic bilingual corpus.",
        epilog=f"Set {pipeline.WORKERS_ENV}=N to use N worker threads during evaluation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults apply to missing keys)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    common.add_argument("--seed", type=int, help="restrict the stage to this seed")
    common.add_argument("--stage-override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. p2h.steps=200 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common])
        if verb == "synthesize":
            p.add_argument("--language", type=int, help="text language (default 0)")
            p.add_argument("--speaker", type=int, help="target speaker (default: held-out speaker)")
            p.add_argument("--style", type=int, help="target style (default: held-out style)")
            p.add_argument("--count", type=int, help="number of test texts to synthesize")
        if verb == "report":
            p.add_argument("run_dirs", nargs="*", type=Path, help="run directories (default: --out)")
            p.add_argument("--report-dir", type=Path, help="where plots go (default: RUN_DIR/report)")
        if verb == "corpus":
            p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.stage_override:
        cfg = apply_overrides(cfg, args.stage_override)
    return cfg.validate()


def run(args) -> int:
    cfg = load_config(args)
    if args.verb == "corpus" and args.dump_config:
        sys.stdout.write(cfg.to_json())
        return 0
    if args.verb == "report":
        written = pipeline.cmd_report(args.run_dirs or [args.out], args.report_dir)
        for path in written:
            print(path)
        return 0
    run_ = pipeline.Run(args.out, cfg)
    if args.verb == "corpus":
        result = pipeline.cmd_corpus(run_)
    elif args.verb == "pretrain":
        result = pipeline.cmd_pretrain(run_, args.seed)
    elif args.verb == "train-h2m":
        result = pipeline.cmd_train_h2m(run_, args.seed)
    elif args.verb == "train-p2h":
        result = pipeline.cmd_train_p2h(run_, args.seed)
    elif args.verb == "synthesize":
        result = pipeline.cmd_synthesize(run_, args.language, args.speaker, args.style, args.seed, args.count)
    elif args.verb == "evaluate":
        result = pipeline.cmd_evaluate(run_, args.seed)
    else:
        result = pipeline.cmd_ablate(run_, args.seed)
    print(result)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except pipeline.StageError as exc:
        print(f"xlingtts {args.verb}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, pipeline.ReportError, ValueError, KeyError, OSError) as exc:
        print(f"xlingtts {args.verb}: [{args.verb}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

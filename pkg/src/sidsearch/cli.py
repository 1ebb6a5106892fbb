"""Command-line entry point: ``sidsearch <command> [flags]``.

Exit codes: 0 success, 1 an evaluation invariant failed, 2 bad config or
arguments, 3 missing input files.
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, load_config
from .distill import MODES
from .pipeline import STAGES, Run, mode_run, parse_mode

DEFAULT_OUT = "runs/default"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI or JSON config file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="run directory (default: $SIDSEARCH_OUT or runs/default)")
    common.add_argument("--trace", action="store_true", help="dump per-group RL traces as JSONL")

    p = argparse.ArgumentParser(prog="sidsearch", description="Generative SID retrieval experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic world and logs")
    sub.add_parser("train-sid", parents=[common], help="fit residual codebooks and assign SIDs")
    s = sub.add_parser("sft", parents=[common], help="supervised stage (with and without CoT tasks)")
    s.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    d = sub.add_parser("distill", parents=[common], help="stage-3 self-distillation")
    d.add_argument("--mode", default="self",
                   help=f"one of {', '.join(MODES)}; codi_l1 accepts +proj and +sd suffixes")
    r = sub.add_parser("rl", parents=[common], help="RL fine-tuning from the self-distilled model")
    r.add_argument("--algo", choices=("grpo", "tpma"), required=True)
    e = sub.add_parser("eval", parents=[common], help="run evaluation protocols")
    e.add_argument("--protocol", action="append", choices=("ladder", "headtail", "sides", "modes"))
    e.add_argument("--checkpoint-dir")
    e.add_argument("--corpus")
    e.add_argument("--n", type=int)
    f = sub.add_parser("full-run", parents=[common], help="every stage followed by every protocol")
    f.add_argument("--skip", action="append", default=[], choices=STAGES)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "n", None) is not None:
            cfg.eval.n = args.n
        cfg.validate()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = args.out or os.environ.get("SIDSEARCH_OUT") or DEFAULT_OUT
    try:
        run = Run(cfg, out, corpus_dir=getattr(args, "corpus", None),
                  checkpoint_dir=getattr(args, "checkpoint_dir", None), trace=args.trace)
        cmd = args.command
        problems: list[str] = []
        if cmd == "gen-corpus":
            run.gen_corpus()
        elif cmd == "train-sid":
            run.train_sid()
        elif cmd == "sft":
            if args.stage == 3:
                for kind in ("base", "cot", "rag", "direct"):
                    run.stage3(kind)
            else:
                for cot in (False, True):
                    run.stage12(args.stage, cot)
        elif cmd == "distill":
            parse_mode(args.mode, cfg.distill).validate()
            run.stage3(mode_run(args.mode)[3:])
        elif cmd == "rl":
            run.rl(args.algo)
        elif cmd == "eval":
            problems = run.evaluate(args.protocol)
        else:
            problems = run.full(args.skip)
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for msg in problems:
        print(f"invariant violated: {msg}", file=sys.stderr)
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())

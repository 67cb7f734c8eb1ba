"""Command-line entry point reproducing the experiment matrix from config files.

Commands exit 0 on success; on failure they print one machine-parsable JSON
line to stderr and exit nonzero.  Environment variables SPEECHLM_OUT and
SPEECHLM_THREADS provide defaults for --out and --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechlm",
        description="Toy-scale speech translation experiments "
                    "(frozen-LM audio conditioning, CTC compression, LoRA, "
                    "from-scratch decoder, seq2seq baseline).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=False, beam=False):
        p.add_argument("--config", type=Path, default=None, help="experiment JSON config")
        p.add_argument("--out", type=Path,
                       default=os.environ.get("SPEECHLM_OUT", "runs/default"),
                       help="output directory (default: $SPEECHLM_OUT or runs/default)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("SPEECHLM_THREADS", "0")),
                       help="BLAS thread cap (0 = leave unchanged)")
        if variant:
            p.add_argument("--variant", required=variant == "required",
                           default=None, help="experiment variant (B1..E5)")
        if beam:
            p.add_argument("--beam", type=int, default=None,
                           help="beam size (default from config: 4)")
        return p

    common(sub.add_parser("gen-data", help="generate the synthetic corpus splits"))
    common(sub.add_parser("pretrain-lm", help="pretrain the text LM on target text"))
    common(sub.add_parser("pretrain-ctc", help="pretrain the CTC duration compressor"))
    common(sub.add_parser("train", help="train one experiment variant"),
           variant="required")
    common(sub.add_parser("decode", help="beam-decode the test split"),
           variant="required", beam=True)
    common(sub.add_parser("rescore", help="LM-rescore the B1 n-best into B2"))
    common(sub.add_parser("eval-bleu", help="score a decode output"),
           variant="required")
    run = common(sub.add_parser("run-matrix",
                                help="run the full dependency DAG and emit the results table"))
    run.add_argument("--variants", default=None,
                     help="comma-separated subset (default: all nine)")
    ins = sub.add_parser("inspect-checkpoint", help="list checkpoint tensors and metadata")
    ins.add_argument("path", type=Path)
    return parser


def _apply_threads(n: int) -> None:
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", 0))

    # Imports deferred so thread env vars land before numpy initializes.
    from . import pipeline
    from .config import load_config
    from .errors import SpeechLmError

    try:
        if args.command == "inspect-checkpoint":
            pipeline.cmd_inspect_checkpoint(args.path)
            return 0

        cfg = load_config(args.config)
        if args.seed is not None:
            import dataclasses

            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = Path(args.out)

        if args.command == "gen-data":
            pipeline.cmd_gen_data(cfg, out)
        elif args.command == "pretrain-lm":
            pipeline.cmd_pretrain_lm(cfg, out)
        elif args.command == "pretrain-ctc":
            pipeline.cmd_pretrain_ctc(cfg, out)
        elif args.command == "train":
            variant = args.variant or cfg.variant
            if variant is None:
                raise SpeechLmError("no variant given (use --variant or config)")
            pipeline.cmd_train(cfg, out, variant)
        elif args.command == "decode":
            variant = args.variant or cfg.variant
            if variant is None:
                raise SpeechLmError("no variant given (use --variant or config)")
            pipeline.cmd_decode(cfg, out, variant, beam=args.beam)
        elif args.command == "rescore":
            pipeline.cmd_rescore(cfg, out)
        elif args.command == "eval-bleu":
            variant = args.variant or cfg.variant
            if variant is None:
                raise SpeechLmError("no variant given (use --variant or config)")
            pipeline.cmd_eval_bleu(cfg, out, variant)
        elif args.command == "run-matrix":
            variants = args.variants.split(",") if args.variants else None
            pipeline.cmd_run_matrix(cfg, out, variants=variants)
        else:  # pragma: no cover - argparse enforces the choices
            raise SpeechLmError(f"unknown command {args.command!r}")
        return 0
    except SpeechLmError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

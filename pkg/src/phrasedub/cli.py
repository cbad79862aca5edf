"""Command-line entry point.

Exit codes: 0 on success, 1 when some dubbing entries failed, 2 on
configuration or schema errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .corpus import FrameSpec
from .errors import PhraseDubError
from . import pipeline


def _cmd_train(args) -> int:
    config = pipeline.RunConfig.load(args.config)
    if args.mode:
        config.mode = args.mode
        config.validate()
    if args.steps is not None:
        config.steps = args.steps
    result = pipeline.run_train(config)
    last = result.history[-1] if result.history else {}
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    if last:
        print("final: " + " ".join(f"{k}={v:.6g}" for k, v in last.items() if k != "step"))
    return 0


def _cmd_dub(args) -> int:
    result = pipeline.run_dub(
        args.checkpoint, args.requests, args.out, manifest=args.manifest, mode=args.mode,
        allow_mode_mismatch=args.allow_mode_mismatch, default_duration=args.default_duration,
    )
    print(f"dubbed {len(result.outputs)} request(s), {len(result.errors)} failed")
    for err in result.errors:
        print(f"  line {err['line']} [{err.get('request_id')}]: {err['error']}", file=sys.stderr)
    return result.exit_code


def _cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = pipeline.run_eval(
        args.out, args.references, transcripts_path=args.transcripts, transcriber=args.asr,
        extractor=args.extractor, metrics=metrics,
    )
    summary = {k: report[k] for k in ("num_utterances", "wer", "wer_shortest_25", "cfdsd")}
    print(json.dumps(summary))
    return 0


def _cmd_inspect(args) -> int:
    spec = FrameSpec(args.sample_rate, args.window, args.hop)
    for line in pipeline.inspect_phrases(args.manifest, spec, args.min_silence, args.max_silence):
        print(line)
    return 0


def _cmd_toy(args) -> int:
    from .synthetic import write_toy_corpus

    print(write_toy_corpus(args.out, args.count, args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phrasedub", description="Phrase-level prosody transfer for dubbing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["PVAE", "GVAE", "GVAE-PP"], help="override the config's mode")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("dub", help="synthesize target features for a dubbing request file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--requests", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="source manifest (default: the training manifest)")
    p.add_argument("--mode", choices=["PVAE", "GVAE", "GVAE-PP"])
    p.add_argument("--allow-mode-mismatch", action="store_true")
    p.add_argument("--default-duration", type=int, default=8, help="frames per phoneme without given durations")
    p.set_defaults(func=_cmd_dub)

    p = sub.add_parser("eval", help="compute WER and cFDSD for a dubbing output directory")
    p.add_argument("--out", required=True, help="directory written by 'dub'")
    p.add_argument("--references", required=True)
    p.add_argument("--transcripts", help="hypothesis transcripts (bypasses the ASR plug-in)")
    p.add_argument("--asr", help="transcriber plug-in name or module:attr")
    p.add_argument("--extractor", help="embedding plug-in name or module:attr (e.g. band-stats)")
    p.add_argument("--metrics", default="wer,cfdsd")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect-phrases", help="print the phrase spans of every manifest utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-silence", type=float, default=0.05)
    p.add_argument("--max-silence", type=float, default=2.0)
    p.add_argument("--sample-rate", type=int, default=24000)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--hop", type=int, default=256)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("make-toy-corpus", help="write a small synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PhraseDubError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

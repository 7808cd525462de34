"""Command-line entry point: ``cptr {train,eval,bench,compare,gen-data}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from cptr.errors import CptrError
from cptr.harness.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cptr.harness.configfile import build_config, load_config
from cptr.harness.experiment import (
    ExperimentConfig,
    MetricsReport,
    config_fingerprint,
    evaluate_recall,
    measure_latency,
    run_experiment,
    run_single,
)
from cptr.harness.report import FORMATS, emit_report
from cptr.model import init_params, perplexity


def _ranks(s: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in s.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ranks must be r1,r2,r3")
    return parts


def _parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, help="experiment seed (u64)")
    shared.add_argument("--config", help="key = value configuration file")
    shared.add_argument("--cptr", choices=("on", "off"), default="off", help="enable the CPTR module")
    shared.add_argument("--ranks", type=_ranks, help="Tucker ranks r1,r2,r3")
    shared.add_argument("--steps", type=int, help="training steps")
    shared.add_argument("--out", help="output path (default: stdout)")
    shared.add_argument("--format", choices=FORMATS, default="json")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cptr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[shared], help="train one model and report its metrics")
    p.add_argument("--checkpoint", help="write the trained model here")
    p = sub.add_parser("eval", parents=[shared], help="perplexity and recall of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("bench", parents=[shared], help="generation latency (ms per token)")
    p.add_argument("--checkpoint", help="model to benchmark (default: a fresh model)")
    sub.add_parser("compare", parents=[shared], help="baseline vs CPTR side by side")
    p = sub.add_parser("gen-data", parents=[shared], help="write the recall dataset as JSON lines")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    return parser


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.ranks is not None:
        overrides["cptr_ranks"] = args.ranks
    return build_config(overrides, exp)


def _model_config(exp: ExperimentConfig, args):
    base, cptr = exp.model_pair()
    return cptr if args.cptr == "on" else base


def _write(args, blob: bytes) -> None:
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(blob)
    else:
        sys.stdout.buffer.write(blob)
        sys.stdout.flush()


def _blank_report(label, config, exp) -> MetricsReport:
    fp = config_fingerprint(config.to_dict())
    return MetricsReport(run_id=f"{label}-{fp[:8]}-s{exp.seed}", model=label, config_fingerprint=fp, seed=exp.seed)


def _label(config) -> str:
    return "cptr" if config.cptr_enabled else "baseline"


def cmd_train(args) -> None:
    exp = _experiment(args)
    config = _model_config(exp, args)
    report, params, state = run_single(config, exp, _label(config))
    if args.checkpoint:
        save_checkpoint(args.checkpoint, Checkpoint(
            config, params, state.step, {"seed": exp.seed, "stream_position": state.step * exp.batch_size}))
    _write(args, emit_report([report], args.format))


def cmd_eval(args) -> None:
    exp = _experiment(args)
    ckpt = load_checkpoint(args.checkpoint)
    exp = replace(exp, model=replace(ckpt.config, cptr_enabled=False))
    data = exp.eval_data()
    report = _blank_report(_label(ckpt.config), ckpt.config, exp)
    report.train_steps = ckpt.step
    report.perplexity = perplexity(ckpt.params, ckpt.config, data.batches(64))
    recall = evaluate_recall(ckpt.params, ckpt.config, data)
    report.recall = {str(d): a for d, a in recall.items()}
    report.recall_overall = float(sum(recall.values()) / len(recall))
    _write(args, emit_report([report], args.format))


def cmd_bench(args) -> None:
    exp = _experiment(args)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        config, params = ckpt.config, ckpt.params
    else:
        config = _model_config(exp, args)
        params = init_params(config)
    report = _blank_report(_label(config), config, exp)
    latency = measure_latency(params, config, exp.latency_batch_sizes, exp.latency_tokens,
                              exp.latency_repeats, exp.latency_prompt_len, seed=exp.seed)
    report.ms_per_token = {str(b): v for b, v in latency.items()}
    _write(args, emit_report([report], args.format))


def cmd_compare(args) -> None:
    _write(args, emit_report(run_experiment(_experiment(args)), args.format))


def cmd_gen_data(args) -> None:
    exp = _experiment(args)
    data = exp.train_data() if args.split == "train" else exp.eval_data()
    _write(args, data.to_jsonl().encode("utf-8"))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "compare": cmd_compare,
            "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (CptrError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``taskmoe`` command line.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 non-finite loss, 5 task resolution failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bleu import BleuError, corpus_bleu
from .checkpoint import CheckpointError
from .config import RunConfigError, load_run_config
from .corpus import CorpusError
from .model import ConfigError, RoutingError
from .tasks import TaskError
from .training import NonFiniteLossError
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_RESOLVE = 0, 2, 3, 4, 5


def _print_step(step: int, loss: float) -> None:
    print(f"{step}\t{loss!r}", flush=True)


def cmd_gen_data(args) -> int:
    rc = load_run_config(args.config)
    manifest = pipeline.gen_data(rc)
    print(f"wrote {len(manifest['train_files'])} train and {len(manifest['test_files'])} test files "
          f"under {rc.paths['data'].parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.bilingual:
        src, _, tgt = args.bilingual.partition("-")
        path = pipeline.train_bilingual(rc, src, tgt, on_step=_print_step)
    else:
        path = pipeline.train_moe(rc, resume=args.resume, on_step=_print_step)
    print(f"final checkpoint: {path}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rc = load_run_config(args.config)
    strategies = [args.strategy] if args.strategy else None
    matrix = pipeline.evaluate(rc, args.checkpoint, strategies, args.out)
    print(matrix.table())
    return EXIT_OK


def cmd_extract(args) -> int:
    out = pipeline.save_extracted(args.checkpoint, args.task, args.out)
    print(f"wrote dense model for task {args.task} to {out}")
    return EXIT_OK


def cmd_route_dump(args) -> int:
    sides = ["encoder", "decoder"] if args.side == "both" else [args.side]
    summary = pipeline.route_dump(args.checkpoint, args.layer, sides, args.out, by_pair=not args.tasks)
    for f in summary["files"]:
        print(f)
    if "overlap" in summary:
        ov = summary["overlap"]
        print(f"encoder/decoder common experts: {ov['intersection_size']} "
              f"(jaccard {ov['jaccard']:.3f}) enc={ov['encoder_experts']} dec={ov['decoder_experts']}")
    return EXIT_OK


def cmd_bleu(args) -> int:
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    print(corpus_bleu(hyps, refs).format())
    return EXIT_OK


def cmd_pipeline(args) -> int:
    rc = load_run_config(args.config)
    result = pipeline.run_pipeline(rc, on_step=_print_step if args.verbose else None)
    print(result["matrix"].table())
    for layer, summary in result["routing"].items():
        if "overlap" in summary:
            ov = summary["overlap"]
            print(f"layer {layer}: encoder/decoder common experts {ov['intersection']} "
                  f"(jaccard {ov['jaccard']:.3f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskmoe", description="Task-level MoE translation lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate synthetic train/test corpora and the vocabulary")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train the task-level MoE (or one bilingual baseline)")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--bilingual", metavar="SRC-TGT", help="train a dense bilingual baseline instead")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="fill the BLEU matrix and write the JSON report")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--strategy", choices=["lp_a", "lp_b", "lp_c", "tl_a", "tl_b"])
    s.add_argument("--out", help="report path (default: paths.report)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("extract", help="extract the dense sub-network of one task")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", required=True, help="task key, e.g. ko (TL) or ja-ko (LP)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("route-dump", help="export expert utilization heatmaps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--side", choices=["encoder", "decoder", "both"], default="both")
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", action="store_true", help="one row per task instead of per language pair")
    s.set_defaults(func=cmd_route_dump)

    s = sub.add_parser("bleu", help="corpus BLEU of two line-aligned files")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=cmd_bleu)

    s = sub.add_parser("pipeline", help="gen-data, train, baselines, evaluate and route-dump in one go")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOLVE
    except (RunConfigError, ConfigError, RoutingError, CorpusError, BleuError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

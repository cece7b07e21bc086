"""
Command-line entry point: sparsekit {prune,compress,bench,train,experiment,report}.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure. Logs go to
stderr; with --json stdout carries one JSON document.
"""

import argparse
import json
import logging
import os
import sys

import pandas as pd

from sparsekit import __version__
from sparsekit.bench import results_frame, run_bench, write_csv
from sparsekit.config import load_config, parse_shape
from sparsekit.errors import ConfigError, SparseKitError
from sparsekit.experiments import make_task, run_recovery_experiment, summarize_runs, train_teacher
from sparsekit.formats import NMPattern, compress, save_compressed, save_mask, sparsity_of
from sparsekit.kernels import THREADS_ENV
from sparsekit.model import load_checkpoint, save_checkpoint
from sparsekit.pruning import magnitude_prune, nm_project
from sparsekit.report import write_report
from sparsekit.saving import compose_filename, run_directory, write_frame, write_json
from sparsekit.tensor import load_matrix, save_matrix
from sparsekit.training import evaluate_splits

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _widths(text):
    widths = [part.strip() for part in text.split(",") if part.strip()]
    for w in widths:
        if w not in ("fp32", "fp16", "int8"):
            raise argparse.ArgumentTypeError(f"unknown value width {w!r}")
    return widths


def _emit(args, payload, text=None):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        print(text if text is not None else json.dumps(payload, indent=2, sort_keys=True, default=str))


def cmd_prune(args):
    W = load_matrix(args.input)
    if args.nm:
        pruned, mask = nm_project(W, NMPattern.parse(args.nm))
    else:
        pruned, mask = magnitude_prune(W, args.sparsity)
    save_matrix(args.output, pruned)
    mask_path = args.mask or os.path.splitext(args.output)[0] + ".skpm"
    save_mask(mask_path, mask.keep)
    stats = sparsity_of(pruned, value_width=args.width).as_dict()
    stats.update(output=args.output, mask=mask_path)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compress(args):
    W = load_matrix(args.input)
    c = compress(W, args.width)
    save_compressed(args.output, c)
    stats = sparsity_of(c, value_width=args.width, dense_bits=32).as_dict()
    stats.update(output=args.output, bytes=os.path.getsize(args.output))
    _emit(args, stats, f"{args.output}: {c.rows}x{c.cols}, sparsity {stats['sparsity']:.4f}, "
                       f"{stats['bits_per_weight']:.3f} bits/weight, {stats['bytes']} bytes")
    return EXIT_OK


def cmd_bench(args):
    shape = parse_shape(args.shape)
    results = run_bench(shape, args.sparsities, value_widths=args.width, reps=args.reps,
                        warmup=args.warmup, threads=args.threads, seed=args.seed)
    out = args.out or compose_filename("bench", "csv", args.shape, "-".join(args.width), f"t{results[0].threads}")
    frame = write_csv(results, out)
    warnings = [w for r in results for w in r.warnings]
    _emit(args, dict(csv=out, rows=frame.to_dict(orient="records"), warnings=warnings),
          results_frame(results).to_string(index=False) + f"\n\nwritten to {out}")
    return EXIT_OK


def _load_config(args):
    overrides = {}
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    return load_config(args.config, **overrides)


def cmd_train(args):
    config = _load_config(args)
    task = make_task(config.task_seed, config.vocab, config.seq, config.train_size, config.val_size,
                     config.test_size)
    teacher, run = train_teacher(config, task)
    out = args.out or os.path.join(config.output_dir, f"teacher-{config.config_hash()[:12]}")
    if os.path.exists(out) and not args.force:
        raise FileExistsError(f"{out} already exists; pass --force to overwrite")
    save_checkpoint(teacher, out)
    write_frame(os.path.join(out, "steps.csv"), run.steps_frame())
    metrics = evaluate_splits(teacher, task.splits())
    _emit(args, dict(checkpoint=out, metrics=metrics, diverged=run.diverged),
          "\n".join(f"{name}: accuracy {m['accuracy']:.4f}, entropy {m['entropy']:.4f}"
                    for name, m in metrics.items()) + f"\ncheckpoint written to {out}")
    return EXIT_OK


def cmd_experiment(args):
    config = _load_config(args)
    run_dir = run_directory(config.output_dir, config, force=args.force)
    task = make_task(config.task_seed, config.vocab, config.seq, config.train_size, config.val_size,
                     config.test_size)

    # -------------------------------------------------------
    # teacher
    if config.teacher_checkpoint:
        teacher = load_checkpoint(config.teacher_checkpoint)
        logger.info("loaded teacher from %s", config.teacher_checkpoint)
    else:
        teacher, _ = train_teacher(config, task)
    save_checkpoint(teacher, os.path.join(run_dir, "teacher"))
    teacher_metrics = evaluate_splits(teacher, task.splits())

    # -------------------------------------------------------
    # sweep
    runs, quant, losses = run_recovery_experiment(teacher, task, config)
    write_frame(os.path.join(run_dir, "runs.csv"), runs)
    write_frame(os.path.join(run_dir, "quant.csv"), quant)
    plot_data = pd.melt(runs, id_vars=["sparsity", "pattern", "variant", "seed"],
                        value_vars=["accuracy", "entropy", "train_entropy"], var_name="metric")
    write_frame(os.path.join(run_dir, "plot_data.csv"), plot_data)
    os.makedirs(os.path.join(run_dir, "losses"), exist_ok=True)
    for name, frame in losses.items():
        write_frame(os.path.join(run_dir, "losses", f"{name}.csv"), frame)

    # -------------------------------------------------------
    # kernels
    if config.bench_shape:
        results = run_bench(parse_shape(config.bench_shape), config.bench_sparsities,
                            value_widths=config.bench_widths, reps=config.bench_reps,
                            warmup=config.bench_warmup, threads=config.threads)
        write_csv(results, os.path.join(run_dir, compose_filename("bench", "csv", config.bench_shape)))

    failures = int((runs["error"].astype(str).str.len() > 0).sum())
    table = summarize_runs(runs, teacher_metrics["test"]["accuracy"])
    summary = dict(run_dir=run_dir, config_hash=config.config_hash(),
                   teacher={f"{split}_{k}": v for split, m in teacher_metrics.items() for k, v in m.items()},
                   runs=len(runs), failures=failures, diverged=int(runs["diverged"].sum()),
                   table=table.to_dict(orient="records"))
    write_json(os.path.join(run_dir, "summary.json"), summary)
    _emit(args, summary, table.to_string(index=False) + f"\n\nrun written to {run_dir}")
    if failures:
        logger.error("%d of %d runs failed", failures, len(runs))
        return EXIT_FAILURE
    return EXIT_OK


def cmd_report(args):
    path, tables, missing = write_report(args.run_dir)
    _emit(args, dict(report=path, tables=sorted(tables), missing=missing), f"report written to {path}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="sparsekit", description="Sparse fine-tuning and sparse inference lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prune", help="magnitude or N:M prune an SKDM matrix")
    p.add_argument("input")
    p.add_argument("output")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--sparsity", type=float)
    group.add_argument("--nm", help="N:M pattern, e.g. 2:4")
    p.add_argument("--mask", help="mask file (default: output with .skpm)")
    p.add_argument("--width", type=str, default="fp16", choices=["fp32", "fp16", "int8"],
                   help="payload width used for the bits/weight statistics")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compress", help="bitmask-compress an SKDM matrix into SKBC")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--width", default="fp32", choices=["fp32", "fp16", "int8"])
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("bench", help="dense vs bitmask matvec latency")
    p.add_argument("--shape", default="4096x12288")
    p.add_argument("--sparsities", type=_floats, default=[0.5, 0.6, 0.7, 0.8, 0.9])
    p.add_argument("--width", type=_widths, default=["fp32"], help="comma-separated payload widths")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: the numba pool size); ${THREADS_ENV} caps it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train the dense teacher")
    p.add_argument("--config")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="sparse recovery sweep")
    p.add_argument("config", nargs="?")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render report.md for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sparsekit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"sparsekit: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SparseKitError, OSError) as exc:
        print(f"sparsekit: {exc}", file=sys.stderr)
        return EXIT_FAILURE

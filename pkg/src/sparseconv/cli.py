"""Command-line front end: mask generation, verification, training, benchmarks.

Subcommands: ``mkmodel``, ``maskgen``, ``verify``, ``train``, ``bench``.
``--model`` accepts either a builtin name or a path to a ``.smod`` file.
Set ``SPARSECONV_LOG`` to error/info/debug to control log verbosity.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from .data import make_shapes_dataset
from .graph import load_model_file, masks_for_graph, save_model_file, verify_equivalence
from .masks import SparsitySchedule, load_masks, save_masks
from .models import BUILTINS, build_builtin
from .training import evaluate, train

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    """Fatal CLI failure; message goes to stderr, exit code 1."""


def _resolve_model(value: str, seed: int):
    if value in BUILTINS:
        return build_builtin(value, seed=seed)
    if not os.path.exists(value):
        raise CliError(f"model file not found: {value}")
    try:
        return load_model_file(value)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load model {value}: {e}") from None


def _sparsity_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sparsity list {text!r}") from None
    if not values or any(not 0.0 <= v < 1.0 for v in values):
        raise argparse.ArgumentTypeError(f"sparsity values must lie in [0, 1): {text!r}")
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseconv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mkmodel", help="write a builtin model to a .smod file")
    p.add_argument("--model", required=True, choices=sorted(BUILTINS), help="builtin name")
    p.add_argument("--out", required=True, help="output .smod path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("maskgen", help="generate propagated masks for a model")
    p.add_argument("--model", required=True, help="model path or builtin")
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--out", required=True, help="output SMSK path")

    p = sub.add_parser("verify", help="check the sparse path against the dense reference")
    p.add_argument("--model", required=True, help="model path or builtin")
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--masks", default=None, help="optional SMSK file overriding --sparsity/--seed")
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("train", help="train on the synthetic shapes task")
    p.add_argument("--model", default="toy-cnn", help="model path or builtin")
    p.add_argument("--sparsity", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--dense-frac", type=float, default=0.10)
    p.add_argument("--freeze-frac", type=float, default=0.90)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--test-size", type=int, default=500)
    p.add_argument("--out-model", default=None, help="write the trained model here (.smod)")
    p.add_argument("--out-masks", default=None, help="write the frozen masks here (SMSK)")
    p.add_argument("--log-csv", default=None, help="write the per-step training log here")

    p = sub.add_parser("bench", help="time dense vs sparse inference")
    p.add_argument("--model", required=True, help="model path or builtin")
    p.add_argument("--sparsity", type=_sparsity_list, default=[0.0, 0.1, 0.2, 0.3, 0.5],
                   help="comma-separated sparsity levels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv-out", "--csv", dest="csv_out", default=None, help="write records to this CSV")
    return parser


def _cmd_mkmodel(args) -> int:
    graph = build_builtin(args.model, seed=args.seed)
    save_model_file(graph, args.out)
    print(f"wrote {args.model} to {args.out}")
    return 0


def _cmd_maskgen(args) -> int:
    graph = _resolve_model(args.model, args.seed)
    masks = masks_for_graph(graph, args.sparsity, args.seed, step=args.step)
    save_masks(masks, args.out)
    zeros = sum(m.num_zero for m in masks)
    cells = sum(m.bits.size for m in masks)
    print(f"wrote {len(masks)} masks ({zeros}/{cells} cells zeroed) to {args.out}")
    return 0


def _cmd_verify(args) -> int:
    graph = _resolve_model(args.model, args.seed)
    if args.masks is not None:
        if not os.path.exists(args.masks):
            raise CliError(f"mask file not found: {args.masks}")
        masks = load_masks(args.masks)
    else:
        masks = masks_for_graph(graph, args.sparsity, args.seed, step=args.step)
    rng = np.random.default_rng(args.seed)
    image = rng.standard_normal(graph.input_shape).astype(np.float32)
    report = verify_equivalence(graph, image, masks, tol=args.tol)
    print(report.format())
    if not report.passed:
        print("equivalence check FAILED", file=sys.stderr)
        return 1
    print("equivalence check passed")
    return 0


def _cmd_train(args) -> int:
    graph = _resolve_model(args.model, args.seed)
    h, w, c = graph.input_shape
    if c != 1 or h != w:
        raise CliError("training expects a square 1-channel model such as toy-cnn")
    train_images, train_labels = make_shapes_dataset(args.train_size, seed=args.seed, size=h)
    test_images, test_labels = make_shapes_dataset(args.test_size, seed=args.seed + 1, size=h)
    schedule = SparsitySchedule(
        total_steps=args.steps,
        target_sparsity=args.sparsity,
        dense_frac=args.dense_frac,
        freeze_frac=args.freeze_frac,
    )
    result = train(
        graph,
        steps=args.steps,
        target_sparsity=args.sparsity,
        schedule=schedule,
        seed=args.seed,
        lr=args.lr,
        batch_size=args.batch_size,
        train_data=(train_images, train_labels),
        log_path=args.log_csv,
    )
    masks = result.frozen_masks if args.sparsity > 0 else None
    acc = evaluate(result.graph, test_images, test_labels, masks)
    print(f"test accuracy: {acc:.4f} (sparsity {args.sparsity}, {args.steps} steps)")
    if args.out_model:
        save_model_file(result.graph, args.out_model)
        print(f"wrote model to {args.out_model}")
    if args.out_masks:
        save_masks(result.frozen_masks, args.out_masks)
        print(f"wrote frozen masks to {args.out_masks}")
    return 0


def _cmd_bench(args) -> int:
    graph = _resolve_model(args.model, args.seed)
    records = bench_mod.bench_model(
        graph,
        args.sparsity,
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
        threads=args.threads,
        model_name=args.model,
    )
    print(f"{'layer':<24} {'s':>5} {'retained':>9} {'dense ms':>10} {'sparse ms':>10} {'speedup':>8}")
    for r in records:
        print(f"{r.layer:<24} {r.sparsity:>5.2f} {r.retained_cols:>9} "
              f"{r.dense_ms:>10.3f} {r.sparse_ms:>10.3f} {r.speedup:>8.3f}")
    if args.csv_out:
        bench_mod.write_records(records, args.csv_out)
        print(f"wrote {len(records)} records to {args.csv_out}")
    return 0


_COMMANDS = {
    "mkmodel": _cmd_mkmodel,
    "maskgen": _cmd_maskgen,
    "verify": _cmd_verify,
    "train": _cmd_train,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    level = os.environ.get("SPARSECONV_LOG", "error").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def app() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())

"""Latency benchmarking of dense vs mask-skipping inference.

Per-layer timings run each sparsity-enabled conv standalone on its real
dense-path input activation; end-to-end timings run the whole graph.
Latencies are medians over repeats, after discarded warmup runs, with
BLAS pinned to the requested thread count so results are stable.  The
same mask seed is used at every sparsity level, so only the mask rate
changes between rows.
"""

import csv
import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .engine import sparse_conv2d
from .graph import ModelGraph, infer, masks_for_graph

logger = logging.getLogger(__name__)

CSV_FIELDS = ("model", "layer", "sparsity", "retained_cols", "dense_ms", "sparse_ms", "speedup")


@dataclass
class BenchRecord:
    model: str
    layer: str  # layer name, or "end2end" for whole-graph rows
    sparsity: float
    retained_cols: int
    dense_ms: float
    sparse_ms: float
    speedup: float


def write_records(records: list[BenchRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow(
                [r.model, r.layer, repr(r.sparsity), r.retained_cols,
                 repr(r.dense_ms), repr(r.sparse_ms), repr(r.speedup)]
            )


def read_records(path) -> list[BenchRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {header}")
        return [
            BenchRecord(
                model=row[0],
                layer=row[1],
                sparsity=float(row[2]),
                retained_cols=int(row[3]),
                dense_ms=float(row[4]),
                sparse_ms=float(row[5]),
                speedup=float(row[6]),
            )
            for row in reader
        ]


def _timed_ms(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1e3


def _interleaved_medians(dense_fn, sparse_fn, repeats: int, warmup: int) -> tuple[float, float]:
    # interleave the two variants, alternating which goes first, so clock
    # and cache drift cancel out of the ratio instead of biasing it
    for _ in range(warmup):
        dense_fn()
        sparse_fn()
    dense_times, sparse_times = [], []
    for i in range(repeats):
        if i % 2 == 0:
            dense_times.append(_timed_ms(dense_fn))
            sparse_times.append(_timed_ms(sparse_fn))
        else:
            sparse_times.append(_timed_ms(sparse_fn))
            dense_times.append(_timed_ms(dense_fn))
    return statistics.median(dense_times), statistics.median(sparse_times)


def bench_model(
    graph: ModelGraph,
    sparsities,
    repeats: int = 10,
    warmup: int = 3,
    seed: int = 0,
    threads: int = 1,
    model_name: str = "model",
    e2e_repeats: int | None = None,
) -> list[BenchRecord]:
    """Per-layer and end-to-end dense/sparse latency records.

    Returns one record per (enabled conv layer, sparsity) plus one
    ``end2end`` record per sparsity.  The dense baseline runs the exact
    same indirection + GEMM machinery without a mask.  ``e2e_repeats``
    optionally raises the sample count for the end-to-end rows alone,
    which carry the headline speedup numbers.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if e2e_repeats is None:
        e2e_repeats = repeats
    sparsities = [float(s) for s in sparsities]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(graph.input_shape).astype(np.float32)

    records: list[BenchRecord] = []
    with threadpool_limits(limits=threads):
        _, acts = infer(graph, x, None, return_activations=True)
        enabled = graph.enabled_convs()
        layer_inputs = {}
        for i, layer in enumerate(graph.layers):
            if layer in enabled:
                src = graph.layer_input_name(i)
                layer_inputs[layer.name] = x if src is None else acts[src]

        e2e_speedups = []
        for s in sparsities:
            masks = masks_for_graph(graph, s, seed, step=0)
            by_name = {l.name: m for l, m in zip(enabled, masks)}
            total_retained = 0
            for layer in enabled:
                inp, wm, m = layer_inputs[layer.name], graph.weights[layer.name], by_name[layer.name]
                dense_ms, sparse_ms = _interleaved_medians(
                    lambda inp=inp, wm=wm, p=layer.conv: sparse_conv2d(inp, wm, params=p),
                    lambda inp=inp, wm=wm, p=layer.conv, m=m: sparse_conv2d(inp, wm, params=p, mask=m),
                    repeats, warmup,
                )
                total_retained += m.num_kept
                records.append(
                    BenchRecord(model_name, layer.name, s, m.num_kept,
                                dense_ms, sparse_ms, dense_ms / sparse_ms)
                )
            dense_e2e_ms, sparse_e2e_ms = _interleaved_medians(
                lambda: infer(graph, x, None),
                lambda masks=masks: infer(graph, x, masks),
                e2e_repeats, warmup,
            )
            speedup = dense_e2e_ms / sparse_e2e_ms
            e2e_speedups.append((s, speedup))
            records.append(
                BenchRecord(model_name, "end2end", s, total_retained,
                            dense_e2e_ms, sparse_e2e_ms, speedup)
            )

    ordered = sorted(e2e_speedups)
    for (s_lo, v_lo), (s_hi, v_hi) in zip(ordered, ordered[1:]):
        if v_hi < v_lo:
            logger.warning(
                "end-to-end speedup is not monotone: %.3fx at s=%g vs %.3fx at s=%g",
                v_hi, s_hi, v_lo, s_lo,
            )
    return records

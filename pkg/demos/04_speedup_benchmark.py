"""Measure the dense vs mask-skipping latency on the resnet18-shape model.

Runs single-threaded with interleaved timing, prints the per-level
end-to-end speedups and a few per-layer rows, and writes the full record
set to a CSV.  Expect roughly linear growth of the speedup with the
sparsity rate; the retained-column counts follow z - floor(s * z)
exactly, and the GEMM work scales with them.
"""

import sparseconv as sc

LEVELS = [0.0, 0.1, 0.2, 0.3, 0.5]

print("building resnet18-shape (random weights; latency only depends on geometry)")
graph = sc.resnet18_shape(seed=0)
print(f"{len(graph.enabled_convs())} sparsity-enabled convs; "
      f"pointwise downsample convs stay dense\n")

records = sc.bench_model(
    graph, LEVELS, repeats=12, warmup=3, seed=0,
    model_name="resnet18-shape", e2e_repeats=32,
)

print("end-to-end:")
print(f"  {'sparsity':>8} {'retained':>9} {'dense ms':>9} {'sparse ms':>10} {'speedup':>8}")
for r in records:
    if r.layer == "end2end":
        print(f"  {r.sparsity:>8.2f} {r.retained_cols:>9} {r.dense_ms:>9.1f} "
              f"{r.sparse_ms:>10.1f} {r.speedup:>8.3f}")

print("\nstage-1 conv at s=0.5 (56x56 grid, 3136 columns dense):")
for r in records:
    if r.layer == "layer1_0_conv1" and r.sparsity == 0.5:
        print(f"  retained {r.retained_cols} = 3136 - floor(0.5 * 3136); "
              f"{r.dense_ms:.2f} -> {r.sparse_ms:.2f} ms ({r.speedup:.2f}x)")

out = "resnet18_shape_bench.csv"
sc.write_records(records, out)
print(f"\nwrote {len(records)} records to {out}")

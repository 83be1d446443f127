"""Walk through the mask-skipping convolution pipeline on a tiny example.

Shows the three stages on a 6x6 input: the indirection buffer that skips
masked output positions, the packed activation matrix with one column per
kept position, the dense GEMM over those columns, and the zero-insertion
scatter back onto the full grid.
"""

import numpy as np

import sparseconv as sc

rng = np.random.default_rng(0)

params = sc.ConvParams(kernel=3, stride=1, padding=1, in_channels=2, out_channels=4)
x = rng.standard_normal((6, 6, 2)).astype(np.float32)
filters = (rng.standard_normal((3, 3, 2, 4)) / np.sqrt(18)).astype(np.float32)
bias = rng.standard_normal(4).astype(np.float32)

# a mask over the conv's OUTPUT grid: 0 drops the whole channel vector there
score = sc.random_score2d(6, 6, seed=7)
mask = sc.rank_and_mask(score, 0.3)
print("mask (1 = keep):")
print(mask.bits.astype(int))
print(f"kept {mask.num_kept} of {mask.bits.size} positions "
      f"(zeros = floor(0.3 * 36) = {mask.num_zero})\n")

# stage 1: indirection buffer -- tap references for kept positions only
buf = sc.build_indirection(x.shape, params, mask)
print(f"indirection buffer: {buf.retained_count} retained columns, "
      f"{buf.taps.shape[1]} taps each, patch length {buf.patch_len}")
print(f"first kept position {tuple(int(v) for v in buf.retained_positions[0])}, "
      f"taps (PAD={sc.PAD} means zero padding):\n{buf.taps[0]}\n")

# stage 2: gather + dense GEMM over the packed columns
packed = sc.pack_columns(x, buf)
print(f"packed activations: {packed.matrix.shape} (patch_len x retained)")
wm = sc.WeightMatrix.from_filters(filters, bias)
sc.mac_counter.reset()
compact = sc.low_rank_gemm(wm, packed)
print(f"compact GEMM output: {compact.shape}, MACs recorded: {sc.mac_counter.total}")
print(f"  = filters({wm.rows}) * patch_len({wm.cols}) * retained({packed.retained_count})\n")

# stage 3: scatter with zero insertion
out = sc.scatter_zeros(compact, mask)
print(f"scattered output: {out.shape}")
print("channel 0, masked positions are exact zeros:")
with np.printoptions(precision=2, suppress=True):
    print(out[:, :, 0])

# the whole pipeline in one call, checked against the direct reference
fused = sc.sparse_conv2d(x, filters, bias, params, mask)
dense = sc.direct_conv2d(x, filters, bias, params)
expected = np.where(mask.bits[:, :, None], dense, np.float32(0))
print(f"\nsparse_conv2d == zero-masked direct conv: "
      f"max |diff| = {np.abs(fused - expected).max():.2e}")

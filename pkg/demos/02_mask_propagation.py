"""Show how one random score map drives the masks of every layer.

A single score grid is sampled at the network input resolution, then
average-pooled down to each layer's output grid before ranking.  Because
all layers rank views of the same map, the spatial pattern lines up
across resolutions: a region dropped at 8x8 tends to be dropped in the
4x4 and 2x2 layers too.
"""

import numpy as np

import sparseconv as sc


def show(mask: sc.SpatialMask, title: str) -> None:
    print(f"{title}  ({mask.num_zero}/{mask.bits.size} zeroed)")
    for row in mask.bits:
        print("  " + "".join("#" if b else "." for b in row))
    print()


input_res = (8, 8)
layer_resolutions = [(8, 8), (4, 4), (4, 4), (2, 2)]

masks = sc.propagate_masks(layer_resolutions, input_res, seed=11, step=0, s=0.4)
for (h, w), mask in zip(layer_resolutions, masks):
    show(mask, f"layer at {h}x{w}")

print("layers sharing a resolution get bit-identical masks:",
      masks[1] == masks[2])

# per-step resampling: a different step gives a fresh pattern
step1 = sc.propagate_masks(layer_resolutions, input_res, seed=11, step=1, s=0.4)
print("step 0 vs step 1 digests differ:",
      sc.mask_set_digest(masks) != sc.mask_set_digest(step1))

# the schedule that drives the sparsity fraction during training
sched = sc.SparsitySchedule(total_steps=1000, target_sparsity=0.4)
print("\nscheduled sparsity along training:")
for t in (0, 99, 100, 300, 500, 700, 899, 900, 999):
    print(f"  step {t:4d}: s = {sc.sparsity_at_step(t, sched):.4f}")

# masks serialize to the SMSK format and round-trip exactly
blob = sc.masks_to_bytes(masks)
print(f"\nSMSK payload: {len(blob)} bytes, round-trip ok:",
      sc.masks_to_bytes(sc.masks_from_bytes(blob)) == blob)

"""Random spatial masks: sampling, pooling, ranking, schedules, file format.

A mask is a binary grid over one conv layer's output positions, 1 = keep.
Dropping a position zeroes its whole channel vector, so the sparsity is
unstructured over space but structured across channels.  All layers share
one random score map sampled at the network input resolution; each layer
sees it average-pooled down to its own output grid, and zeroes the lowest
scored fraction of cells.  Layers at the same resolution therefore get
bit-identical masks, and coarser layers get the block-mean view of the
same spatial pattern.

Masks serialize to the SMSK byte format, little-endian throughout::

    b"SMSK" | version u8 | layer_count u32
    per layer: height u32 | width u32 | zero_count u32 | cell_count u32
               | ceil(h*w/8) bytes of row-major bits, LSB first, 1 = keep

zero_count / cell_count is the realized sparsity of the stored grid, so a
load/save cycle reproduces the bytes exactly.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .ops import ConfigurationError

_SMSK_MAGIC = b"SMSK"
_SMSK_VERSION = 1


class MaskFormatError(ValueError):
    """Malformed SMSK payload."""


@dataclass(eq=False)
class SpatialMask:
    """Keep/drop bits over a conv layer's output grid (True = keep)."""

    bits: np.ndarray
    sparsity_fraction: float | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ConfigurationError(f"mask bits must be 2-D, got shape {bits.shape}")
        self.bits = bits.astype(bool, copy=False)
        if self.sparsity_fraction is None:
            self.sparsity_fraction = self.num_zero / self.bits.size
        elif not 0.0 <= self.sparsity_fraction <= 1.0:
            raise ConfigurationError(f"sparsity fraction {self.sparsity_fraction} outside [0, 1]")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def num_zero(self) -> int:
        return int(self.bits.size - np.count_nonzero(self.bits))

    @property
    def num_kept(self) -> int:
        return int(np.count_nonzero(self.bits))

    def keep_flat_indices(self) -> np.ndarray:
        """Row-major flat indices of kept positions, ascending."""
        return np.flatnonzero(self.bits.ravel())

    def masked_flat_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.bits.ravel())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatialMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))


@dataclass(frozen=True)
class SparsitySchedule:
    """Three-stage sparsity schedule: dense warmup, cubic ramp, frozen tail."""

    total_steps: int
    target_sparsity: float
    dense_frac: float = 0.10
    freeze_frac: float = 0.90
    ramp_shape: str = "cubic"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigurationError(f"target sparsity {self.target_sparsity} outside [0, 1)")
        if not 0.0 <= self.dense_frac < self.freeze_frac <= 1.0:
            raise ConfigurationError(
                f"need 0 <= dense_frac < freeze_frac <= 1, got {self.dense_frac}, {self.freeze_frac}"
            )
        if self.ramp_shape != "cubic":
            raise ConfigurationError(f"unsupported ramp shape {self.ramp_shape!r}")

    @property
    def dense_end(self) -> float:
        return self.dense_frac * self.total_steps

    @property
    def freeze_start(self) -> float:
        return self.freeze_frac * self.total_steps


def random_score2d(height: int, width: int, seed: int, step: int = 0) -> np.ndarray:
    """Uniform [0, 1) score grid, reproducible from (seed, step, shape).

    Each (seed, step) pair keys its own counter-based stream, so score
    maps can be regenerated at any step without storing them.
    """
    if height < 1 or width < 1:
        raise ConfigurationError(f"score map must be at least 1x1, got {height}x{width}")
    if seed < 0 or step < 0:
        raise ConfigurationError("seed and step must be non-negative")
    key = np.array([seed, step], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.random((height, width))


def downsample_score(score: np.ndarray, ratio: int) -> np.ndarray:
    """Average-pool a score map by an integer factor (kernel = stride = ratio)."""
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ConfigurationError(f"score map must be 2-D, got shape {score.shape}")
    ratio = int(ratio)
    if ratio < 1:
        raise ConfigurationError(f"ratio must be >= 1, got {ratio}")
    h, w = score.shape
    if h % ratio or w % ratio:
        raise ConfigurationError(f"score map {h}x{w} is not divisible by ratio {ratio}")
    if ratio == 1:
        return score.copy()
    return score.reshape(h // ratio, ratio, w // ratio, ratio).mean(axis=(1, 3))


def rank_and_mask(score: np.ndarray, s: float) -> SpatialMask:
    """Zero the floor(s * cells) lowest-scored cells of a score map.

    Ties break toward the lower row-major index, so the mask is a pure
    function of the score values.  The count uses the double-precision
    product, consistently with every other place the law is checked.
    """
    score = np.asarray(score)
    if score.ndim != 2:
        raise ConfigurationError(f"score map must be 2-D, got shape {score.shape}")
    if not 0.0 <= s < 1.0:
        raise ConfigurationError(f"sparsity fraction {s} outside [0, 1)")
    h, w = score.shape
    m = int(s * h * w)
    bits = np.ones(h * w, dtype=bool)
    if m:
        order = np.argsort(score.ravel(), kind="stable")
        bits[order[:m]] = False
    return SpatialMask(bits.reshape(h, w), sparsity_fraction=float(s))


def propagate_masks(
    layer_output_resolutions: list[tuple[int, int]],
    input_res: tuple[int, int],
    seed: int,
    step: int,
    s: float,
) -> list[SpatialMask]:
    """One mask per layer, all pooled from a single input-resolution score map.

    Every layer resolution must divide the input resolution with the same
    integer ratio on both axes; anything else is a configuration error,
    not a resize heuristic.  Layers sharing a resolution share the exact
    same mask object.
    """
    ih, iw = input_res
    ratios = []
    for i, (h, w) in enumerate(layer_output_resolutions):
        if h < 1 or w < 1:
            raise ConfigurationError(f"layer {i}: bad output resolution {h}x{w}")
        if ih % h or iw % w:
            raise ConfigurationError(
                f"layer {i}: output {h}x{w} does not divide input {ih}x{iw}"
            )
        ry, rx = ih // h, iw // w
        if ry != rx:
            raise ConfigurationError(
                f"layer {i}: unequal downsample ratios {ry} (rows) vs {rx} (cols)"
            )
        ratios.append(ry)
    score = random_score2d(ih, iw, seed, step)
    by_ratio: dict[int, SpatialMask] = {}
    masks = []
    for ratio in ratios:
        if ratio not in by_ratio:
            by_ratio[ratio] = rank_and_mask(downsample_score(score, ratio), s)
        masks.append(by_ratio[ratio])
    return masks


def sparsity_at_step(t: int, sched: SparsitySchedule) -> float:
    """Scheduled sparsity at step t: 0, cubic ramp, or the frozen target."""
    if not 0 <= t < sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps})")
    t0, t1 = sched.dense_end, sched.freeze_start
    if t < t0:
        return 0.0
    if t >= t1:
        return sched.target_sparsity
    tau = (t - t0) / (t1 - t0)
    return sched.target_sparsity * (1.0 - (1.0 - tau) ** 3)


def masks_to_bytes(masks: list[SpatialMask]) -> bytes:
    out = bytearray()
    out += _SMSK_MAGIC
    out.append(_SMSK_VERSION)
    out += struct.pack("<I", len(masks))
    for m in masks:
        out += struct.pack("<IIII", m.height, m.width, m.num_zero, m.bits.size)
        out += np.packbits(m.bits.ravel(), bitorder="little").tobytes()
    return bytes(out)


def masks_from_bytes(data: bytes) -> list[SpatialMask]:
    if len(data) < 9:
        raise MaskFormatError("payload shorter than the SMSK header")
    if data[:4] != _SMSK_MAGIC:
        raise MaskFormatError(f"bad magic {data[:4]!r}, expected {_SMSK_MAGIC!r}")
    if data[4] != _SMSK_VERSION:
        raise MaskFormatError(f"unsupported SMSK version {data[4]}")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    masks = []
    for i in range(count):
        if pos + 16 > len(data):
            raise MaskFormatError(f"truncated header for mask {i}")
        h, w, zeros, cells = struct.unpack_from("<IIII", data, pos)
        pos += 16
        if h < 1 or w < 1 or cells != h * w:
            raise MaskFormatError(f"mask {i}: inconsistent dimensions {h}x{w} vs {cells} cells")
        nbytes = (cells + 7) // 8
        if pos + nbytes > len(data):
            raise MaskFormatError(f"truncated bit grid for mask {i}")
        packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos)
        pos += nbytes
        bits = np.unpackbits(packed, count=cells, bitorder="little").astype(bool).reshape(h, w)
        mask = SpatialMask(bits)
        if mask.num_zero != zeros:
            raise MaskFormatError(
                f"mask {i}: header says {zeros} zeros, bit grid has {mask.num_zero}"
            )
        masks.append(mask)
    if pos != len(data):
        raise MaskFormatError(f"{len(data) - pos} trailing bytes after the last mask")
    return masks


def save_masks(masks: list[SpatialMask], path) -> None:
    with open(path, "wb") as f:
        f.write(masks_to_bytes(masks))


def load_masks(path) -> list[SpatialMask]:
    with open(path, "rb") as f:
        return masks_from_bytes(f.read())


def mask_set_digest(masks: list[SpatialMask]) -> str:
    """Stable hash of a whole mask set; used to detect frozen masks."""
    return hashlib.sha256(masks_to_bytes(masks)).hexdigest()

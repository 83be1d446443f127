"""Mask-skipping convolution: indirection buffer, column packing, low-rank
GEMM, and zero-insertion scatter.

The pipeline has three stages.  First an indirection buffer is built that
lists, for every *kept* output position, the input locations of its patch
taps; masked positions are skipped outright, so downstream work scales
with the kept count.  Second, the referenced channel vectors are gathered
into a packed activation matrix and multiplied with the unrolled weight
matrix by a standard, unmodified dense GEMM.  Third, the compact GEMM
output is scattered back onto the full output grid in one back-to-front
sweep, writing exact zeros at masked positions.  The sweep order makes
the scatter safe even when the compact matrix occupies the head of the
output buffer itself, so callers may reuse one buffer for both.
"""

from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .masks import SpatialMask
from .ops import ConfigurationError, ConvParams, WeightMatrix

#: Tap sentinel for positions that fall into the zero padding.  The packer
#: resolves it against a shared zero channel-vector appended to the input
#: rows, so no per-tap branch is needed.
PAD = -1


class MacCounter:
    """Running count of multiply-accumulate operations submitted to the GEMM."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)

    def reset(self) -> None:
        self.total = 0


#: Module-wide GEMM work meter; benchmarks and tests read deltas from it.
mac_counter = MacCounter()


@dataclass
class IndirectionBuffer:
    """Per-kept-output-position references to input patch taps.

    ``taps[j, k]`` is the flat spatial index ``y * width + x`` of tap k of
    kept position j (the start of that position's channel vector), or
    :data:`PAD` when the tap lies in the padding.  Kept positions appear
    in row-major output order.
    """

    retained_positions: np.ndarray  # (r, 2) int32 rows of (out_y, out_x)
    taps: np.ndarray                # (r, kh*kw) int64
    input_shape: tuple[int, int, int]
    params: ConvParams
    out_shape: tuple[int, int]

    @property
    def retained_count(self) -> int:
        return self.taps.shape[0]

    @property
    def patch_len(self) -> int:
        return self.params.patch_len


@dataclass
class PackedActivations:
    """Gathered activation matrix, one column per kept output position.

    ``matrix`` has shape ``(patch_len, retained_count)``; column j is the
    unrolled patch of kept position j, taps in the shared order, with
    exact zeros where taps fell into the padding.
    """

    matrix: np.ndarray

    @property
    def patch_len(self) -> int:
        return self.matrix.shape[0]

    @property
    def retained_count(self) -> int:
        return self.matrix.shape[1]


@lru_cache(maxsize=128)
def _dense_tap_grid(input_hw: tuple[int, int], params: ConvParams) -> np.ndarray:
    """Tap indices for every output position of a conv geometry, cached.

    The grid depends only on shapes, never on values or masks, so it is
    computed once per geometry (the indirection init of a dense setup).
    Returned read-only; masked buffers row-gather from it.
    """
    h, w = input_hw
    oh, ow = params.out_shape(h, w)
    kh, kw = params.kernel
    (sh, sw), (ph, pw), (dh, dw) = params.stride, params.padding, params.dilation
    pos = np.arange(oh * ow, dtype=np.int64)
    pos_y, pos_x = pos // ow, pos % ow
    ky, kx = np.divmod(np.arange(kh * kw, dtype=np.int64), kw)
    in_y = (pos_y * sh - ph)[:, None] + ky[None, :] * dh
    in_x = (pos_x * sw - pw)[:, None] + kx[None, :] * dw
    inside = (in_y >= 0) & (in_y < h) & (in_x >= 0) & (in_x < w)
    taps = np.where(inside, in_y * w + in_x, PAD)
    taps.setflags(write=False)
    return taps


# Built buffers are memoized per (input shape, conv params, mask bits):
# indirection init is a setup-time cost in an indirect-convolution engine,
# so repeated inference with the same geometry and masks reuses it.  The
# cache is small and bounded; entries are returned read-only and shared.
_buffer_cache: OrderedDict = OrderedDict()
_BUFFER_CACHE_SIZE = 64


def build_indirection(
    input_shape: tuple[int, int, int],
    params: ConvParams,
    mask: SpatialMask | None = None,
) -> IndirectionBuffer:
    """Tap references for every kept output position, in row-major order.

    With ``mask=None`` every position is kept and the buffer describes a
    plain dense convolution.  A mask only removes whole output positions;
    input pixels shared with kept windows keep being referenced by those
    windows' columns.  Buffers are cached by content: callers must treat
    them as immutable.
    """
    if len(input_shape) != 3:
        raise ConfigurationError(f"input shape must be (h, w, c), got {input_shape}")
    h, w, c = input_shape
    if c != params.in_channels:
        raise ConfigurationError(f"input has {c} channels, params expect {params.in_channels}")
    oh, ow = params.out_shape(h, w)
    if mask is not None and (mask.height, mask.width) != (oh, ow):
        raise ConfigurationError(
            f"mask is {mask.height}x{mask.width}, conv output is {oh}x{ow}"
        )
    mask_key = None if mask is None else np.packbits(mask.bits.ravel()).tobytes()
    key = ((h, w, c), params, mask_key)
    cached = _buffer_cache.get(key)
    if cached is not None:
        _buffer_cache.move_to_end(key)
        return cached

    grid = _dense_tap_grid((h, w), params)
    if mask is None:
        kept = np.arange(oh * ow, dtype=np.int64)
        taps = grid
    else:
        kept = mask.keep_flat_indices().astype(np.int64)
        taps = grid[kept]
        taps.setflags(write=False)
    positions = np.stack([kept // ow, kept % ow], axis=1).astype(np.int32)
    positions.setflags(write=False)
    buf = IndirectionBuffer(
        retained_positions=positions,
        taps=taps,
        input_shape=(h, w, c),
        params=params,
        out_shape=(oh, ow),
    )
    _buffer_cache[key] = buf
    if len(_buffer_cache) > _BUFFER_CACHE_SIZE:
        _buffer_cache.popitem(last=False)
    return buf


def pack_columns(inputs: np.ndarray, buf: IndirectionBuffer) -> PackedActivations:
    """Gather the referenced channel vectors into the packed matrix.

    One fancy-indexed gather over an input view extended with a single
    zero row; PAD taps resolve to that row, so padding contributes exact
    zeros without branching.
    """
    x = np.ascontiguousarray(inputs, dtype=np.float32)
    if x.shape != buf.input_shape:
        raise ConfigurationError(
            f"input shape {x.shape} does not match buffer shape {buf.input_shape}"
        )
    h, w, c = buf.input_shape
    rows = x.reshape(h * w, c)
    ext = np.concatenate([rows, np.zeros((1, c), dtype=np.float32)])
    r = buf.retained_count
    # PAD == -1 indexes the appended zero row.
    gathered = ext[buf.taps.ravel()].reshape(r, buf.patch_len)
    return PackedActivations(matrix=gathered.T)


def low_rank_gemm(
    w: WeightMatrix,
    a: PackedActivations,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Dense GEMM over the packed columns: ``C = w.data @ a.matrix + bias``.

    Returns the ``(filters, retained_count)`` product with the bias added
    to every retained column.  Masked positions never reach this stage,
    so the multiply-accumulate count is exactly
    ``filters * patch_len * retained_count``, which is what the module
    counter records.  ``out``, when given, must be a C-contiguous
    ``(retained_count, filters)`` float32 buffer; the result is written
    there and the returned matrix is its transposed view.
    """
    if w.cols != a.patch_len:
        raise ConfigurationError(
            f"weight matrix has {w.cols} columns, packed patches have {a.patch_len}"
        )
    r = a.retained_count
    cols = a.matrix.T  # (r, patch_len), the contiguous gather layout
    if out is None:
        out = np.empty((r, w.rows), dtype=np.float32)
    elif out.shape != (r, w.rows) or out.dtype != np.float32 or not out.flags.c_contiguous:
        raise ConfigurationError("out buffer must be C-contiguous float32 of shape (retained, filters)")
    np.dot(np.ascontiguousarray(cols, dtype=np.float32), w.data.T, out=out)
    out += w.bias
    mac_counter.add(w.rows * w.cols * r)
    return out.T


def scatter_zeros(
    compact: np.ndarray,
    mask: SpatialMask,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Insert the compact GEMM columns into the full output grid.

    Fills ``out`` in a single sweep over the output positions from the
    last to the first: a masked position gets an exact-zero channel
    vector, a kept position consumes the next unconsumed compact column
    from the back.  The backward order means ``compact`` may even alias
    the head rows of ``out`` (the zero-copy buffer-reuse arrangement): a
    head row is always consumed before any relocation can land on it.
    The vectorized equivalent below snapshots the head block in that case
    to give numpy the same guarantee; with a separate ``compact`` the
    relocations are copied straight in.  ``out`` may be a preallocated
    ``(out_h, out_w, n)`` or ``(out_h * out_w, n)`` float32 buffer.
    """
    compact = np.asarray(compact, dtype=np.float32)
    if compact.ndim != 2:
        raise ConfigurationError(f"compact matrix must be 2-D, got shape {compact.shape}")
    n, r = compact.shape
    if r != mask.num_kept:
        raise RuntimeError(
            f"internal invariant violated: {r} compact columns for {mask.num_kept} kept positions"
        )
    z = mask.height * mask.width
    if out is None:
        if mask.num_zero == 0:
            # nothing to insert: the compact buffer is already the output
            return np.ascontiguousarray(compact.T).reshape(mask.height, mask.width, n)
        out = np.empty((z, n), dtype=np.float32)
    if out.dtype != np.float32 or out.size != z * n or not out.flags.c_contiguous:
        raise ConfigurationError(f"out buffer must be contiguous float32 with {z * n} elements")
    rows = out.reshape(z, n)

    aliased = np.shares_memory(compact, rows)
    if mask.num_zero == 0:
        if not aliased:
            rows[:] = compact.T
        return rows.reshape(mask.height, mask.width, n)
    head = rows[:r].copy() if aliased else np.ascontiguousarray(compact.T)
    rows[mask.keep_flat_indices()] = head
    rows[mask.masked_flat_indices()] = 0.0
    return rows.reshape(mask.height, mask.width, n)


def sparse_conv2d(
    inputs: np.ndarray,
    weights: np.ndarray | WeightMatrix,
    bias: np.ndarray | None = None,
    params: ConvParams | None = None,
    mask: SpatialMask | None = None,
) -> np.ndarray:
    """Masked convolution via indirection buffer + packed GEMM + scatter.

    Equivalent to the dense reference convolution with the channel
    vectors of masked output positions replaced by exact zeros (bias
    included only at kept positions).  ``weights`` is either a
    ``(kh, kw, c, n)`` filter bank with a separate ``bias`` or an already
    unrolled :class:`WeightMatrix` carrying its own bias.  ``mask=None``
    runs the same pipeline densely.
    """
    if params is None:
        raise ConfigurationError("params is required")
    if isinstance(weights, WeightMatrix):
        wm = weights
    else:
        wm = WeightMatrix.from_filters(weights, bias)
    if wm.kernel != params.kernel or wm.in_channels != params.in_channels:
        raise ConfigurationError(
            f"weight matrix geometry {wm.kernel}/{wm.in_channels} does not match params"
        )
    buf = build_indirection(np.shape(inputs), params, mask)
    packed = pack_columns(inputs, buf)
    oh, ow = buf.out_shape
    compact = low_rank_gemm(wm, packed)
    if mask is None:
        return compact.T.reshape(oh, ow, wm.rows)
    return scatter_zeros(compact, mask)

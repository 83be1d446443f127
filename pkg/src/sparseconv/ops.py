"""Dense tensor conventions and reference operators for small CNNs.

Activations are plain numpy arrays in channel-last layout: ``(height,
width, channels)`` for a single image, with an optional leading batch
axis.  Engine values are 32-bit floats.  Patch taps are always ordered
kernel row -> kernel col -> channel; the weight unrolling, the
indirection buffer and the training im2col all share this order, so the
outputs of the different convolution paths can be compared element by
element.
"""

from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    """Inconsistent shapes or operator parameters."""


def _pair(value, name):
    if isinstance(value, (int, np.integer)):
        value = (value, value)
    try:
        a, b = (int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"{name} must be an int or a symmetric (h, w) pair, got {value!r}"
        ) from None
    return (a, b)


@dataclass(frozen=True)
class ConvParams:
    """Shape parameters of a 2-D convolution.

    Padding is symmetric zero padding only; a per-side 4-tuple is
    rejected here rather than silently truncated.
    """

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name), name))
        for name in ("kernel", "stride", "dilation"):
            if min(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} components must be >= 1, got {getattr(self, name)}")
        if min(self.padding) < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")

    @property
    def patch_len(self) -> int:
        """Unrolled patch size: kernel_h * kernel_w * in_channels."""
        return self.kernel[0] * self.kernel[1] * self.in_channels

    def out_shape(self, height: int, width: int) -> tuple[int, int]:
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (ph, pw), (dh, dw) = self.padding, self.dilation
        oh = (height + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        ow = (width + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if oh < 1 or ow < 1:
            raise ConfigurationError(
                f"kernel {self.kernel} does not fit a {height}x{width} input "
                f"(stride {self.stride}, padding {self.padding}, dilation {self.dilation})"
            )
        return oh, ow


@dataclass
class WeightMatrix:
    """Conv filters unrolled for GEMM: row r is filter r, taps in the shared order.

    ``data`` has shape ``(out_channels, kernel_h * kernel_w * in_channels)``
    and ``bias`` has one entry per filter.
    """

    data: np.ndarray
    bias: np.ndarray
    kernel: tuple[int, int]
    in_channels: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.data.ndim != 2:
            raise ConfigurationError(f"weight matrix must be 2-D, got shape {self.data.shape}")
        kh, kw = self.kernel
        if self.data.shape[1] != kh * kw * self.in_channels:
            raise ConfigurationError(
                f"weight matrix has {self.data.shape[1]} columns, expected "
                f"{kh}*{kw}*{self.in_channels} = {kh * kw * self.in_channels}"
            )
        if self.bias.shape != (self.data.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match {self.data.shape[0]} filters"
            )

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_filters(cls, filters: np.ndarray, bias: np.ndarray | None = None) -> "WeightMatrix":
        """Unroll a ``(kh, kw, in_c, out_c)`` filter bank into matrix rows."""
        filters = np.asarray(filters, dtype=np.float32)
        if filters.ndim != 4:
            raise ConfigurationError(f"filter bank must be 4-D, got shape {filters.shape}")
        kh, kw, c, n = filters.shape
        if bias is None:
            bias = np.zeros(n, dtype=np.float32)
        data = filters.reshape(kh * kw * c, n).T
        return cls(data=data, bias=bias, kernel=(kh, kw), in_channels=c)

    def to_filters(self) -> np.ndarray:
        """Inverse of :meth:`from_filters`; returns a ``(kh, kw, c, n)`` array."""
        kh, kw = self.kernel
        return np.ascontiguousarray(
            self.data.T.reshape(kh, kw, self.in_channels, self.rows)
        )


def _as_image(t) -> np.ndarray:
    t = np.ascontiguousarray(t, dtype=np.float32)
    if t.ndim != 3:
        raise ConfigurationError(f"expected a (height, width, channels) array, got shape {t.shape}")
    return t


def direct_conv2d(
    inputs: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None,
    params: ConvParams,
) -> np.ndarray:
    """Reference convolution with explicit per-tap accumulation.

    Accumulates one (kernel row, kernel col, channel) tap at a time, in
    that order, and adds the bias last, so any other loop using the same
    ordering reproduces it bit for bit in float32.  Slow but obviously
    correct; the GEMM path is checked against this.
    """
    x = _as_image(inputs)
    w = np.ascontiguousarray(weights, dtype=np.float32)
    if w.ndim != 4:
        raise ConfigurationError(f"weights must be 4-D (kh, kw, c, n), got shape {w.shape}")
    kh, kw = params.kernel
    c, n = params.in_channels, params.out_channels
    if w.shape != (kh, kw, c, n):
        raise ConfigurationError(f"weights shape {w.shape} does not match params {(kh, kw, c, n)}")
    h, wdt, cin = x.shape
    if cin != c:
        raise ConfigurationError(f"input has {cin} channels, params expect {c}")
    (sh, sw), (ph, pw), (dh, dw) = params.stride, params.padding, params.dilation
    oh, ow = params.out_shape(h, wdt)

    xp = np.zeros((h + 2 * ph, wdt + 2 * pw, c), dtype=np.float32)
    xp[ph:ph + h, pw:pw + wdt] = x
    out = np.zeros((oh, ow, n), dtype=np.float32)
    for ky in range(kh):
        ys = slice(ky * dh, ky * dh + sh * oh, sh)
        for kx in range(kw):
            window = xp[ys, slice(kx * dw, kx * dw + sw * ow, sw)]
            for ci in range(c):
                out += window[:, :, ci, None] * w[ky, kx, ci]
    if bias is not None:
        b = np.asarray(bias, dtype=np.float32)
        if b.shape != (n,):
            raise ConfigurationError(f"bias shape {b.shape} does not match {n} filters")
        out += b
    return out


def relu(t: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(t, 0)


def pool2d(t: np.ndarray, kind: str, k: int, stride: int) -> np.ndarray:
    """2-D max or average pooling, no padding or dilation."""
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"unknown pooling kind {kind!r}")
    t = np.asarray(t)
    if t.ndim != 3:
        raise ConfigurationError(f"expected a (height, width, channels) array, got shape {t.shape}")
    k, stride = int(k), int(stride)
    if k < 1 or stride < 1:
        raise ConfigurationError("pooling kernel and stride must be >= 1")
    h, w, _ = t.shape
    if k > h or k > w:
        raise ConfigurationError(f"pooling kernel {k} larger than input {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    acc = None
    for ky in range(k):
        for kx in range(k):
            win = t[ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
            if acc is None:
                acc = win.astype(t.dtype, copy=True)
            elif kind == "max":
                np.maximum(acc, win, out=acc)
            else:
                acc += win
    if kind == "avg":
        acc /= k * k
    return acc


def global_avg_pool(t: np.ndarray) -> np.ndarray:
    """Mean over the spatial grid; returns one value per channel."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ConfigurationError(f"expected a (height, width, channels) array, got shape {t.shape}")
    return t.mean(axis=(0, 1))


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def fully_connected(t: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense head: ``w @ t + b`` over a flattened feature vector."""
    t, w, b = np.asarray(t), np.asarray(w), np.asarray(b)
    if t.ndim != 1:
        raise ConfigurationError(f"expected a flattened vector, got shape {t.shape}")
    if w.ndim != 2 or w.shape[1] != t.shape[0]:
        raise ConfigurationError(f"weight shape {w.shape} does not match input length {t.shape[0]}")
    if b.shape != (w.shape[0],):
        raise ConfigurationError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    return w @ t + b

"""Model graphs, the .smod container, and dense/sparse inference.

Graphs are ordered layer lists: linear chains plus single-skip residual
adds.  Each layer consumes the previous layer's output unless it names an
earlier layer via ``input_from``; ``add`` layers sum their input with the
output of the layer named in ``add_from``.  Conv layers own a
:class:`~sparseconv.ops.WeightMatrix`; only conv layers can carry a
sparsity mask, and pointwise layers used as residual downsamples are
conventionally built with ``sparsity_enabled=False``.

The ``.smod`` container is: an 8-byte little-endian unsigned manifest
length, that many bytes of UTF-8 JSON (layers, shapes, flags, and
byte offsets into the blob), then a raw blob of little-endian float32
values.  Saving is deterministic, so save(load(b)) == b.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import sparse_conv2d
from .masks import SpatialMask, SparsitySchedule, propagate_masks
from .ops import (
    ConfigurationError,
    ConvParams,
    WeightMatrix,
    direct_conv2d,
    elementwise_add,
    fully_connected,
    global_avg_pool,
    pool2d,
    relu,
)

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "global_avgpool", "add", "flatten", "fc")


class ModelFormatError(ValueError):
    """Malformed or inconsistent .smod payload."""


@dataclass
class FcWeights:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray    # (out_features,)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"bad fc weights: weight {self.weight.shape}, bias {self.bias.shape}"
            )


@dataclass
class LayerSpec:
    name: str
    kind: str
    conv: ConvParams | None = None
    sparsity_enabled: bool = False
    pool_kernel: int = 0
    pool_stride: int = 0
    add_from: str | None = None
    input_from: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "conv" and self.conv is None:
            raise ConfigurationError(f"layer {self.name!r}: conv layer needs ConvParams")
        if self.kind in ("maxpool", "avgpool") and (self.pool_kernel < 1 or self.pool_stride < 1):
            raise ConfigurationError(f"layer {self.name!r}: pooling needs kernel and stride >= 1")
        if self.kind == "add" and not self.add_from:
            raise ConfigurationError(f"layer {self.name!r}: add layer needs add_from")
        if self.sparsity_enabled and self.kind != "conv":
            raise ConfigurationError(f"layer {self.name!r}: only conv layers can be sparsified")


@dataclass
class ModelGraph:
    """Validated, shape-annotated model. Immutable topology; weights may be
    updated in place by the trainer."""

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    weights: dict[str, WeightMatrix | FcWeights]
    shapes: dict[str, tuple] = field(init=False, default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"input shape must be (h, w, c), got {self.input_shape}")
        self.shapes = _infer_shapes(self)
        _check_mask_resolutions(self)

    def enabled_convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv" and l.sparsity_enabled]

    def enabled_resolutions(self) -> list[tuple[int, int]]:
        return [self.shapes[l.name][:2] for l in self.enabled_convs()]

    def layer_input_name(self, index: int) -> str | None:
        """Name of the layer feeding layers[index], or None for the graph input."""
        layer = self.layers[index]
        if layer.input_from is not None:
            return layer.input_from
        if index == 0:
            return None
        return self.layers[index - 1].name


@dataclass
class SparsityConfig:
    """Bundle of sparsity settings: target rate, schedule, seed, overrides.

    ``enabled_overrides`` maps layer names to a flag replacing the
    layer's own ``sparsity_enabled`` when masks are generated.
    """

    target_sparsity: float
    schedule: SparsitySchedule | None = None
    seed: int = 0
    enabled_overrides: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigurationError(f"target sparsity {self.target_sparsity} outside [0, 1)")

    def masked_layers(self, graph: ModelGraph) -> list[LayerSpec]:
        out = []
        for layer in graph.layers:
            if layer.kind != "conv":
                continue
            if self.enabled_overrides.get(layer.name, layer.sparsity_enabled):
                out.append(layer)
        return out

    def masks_for(self, graph: ModelGraph, step: int = 0) -> dict[str, SpatialMask]:
        layers = self.masked_layers(graph)
        resolutions = [graph.shapes[l.name][:2] for l in layers]
        masks = propagate_masks(
            resolutions, graph.input_shape[:2], self.seed, step, self.target_sparsity
        )
        return {l.name: m for l, m in zip(layers, masks)}


def _infer_shapes(graph: ModelGraph) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    seen = set()
    prev: tuple = graph.input_shape
    for i, layer in enumerate(graph.layers):
        if layer.name in seen:
            raise ConfigurationError(f"duplicate layer name {layer.name!r}")
        seen.add(layer.name)
        if layer.input_from is not None:
            if layer.input_from not in shapes:
                raise ConfigurationError(
                    f"layer {layer.name!r}: input_from {layer.input_from!r} is not an earlier layer"
                )
            inp = shapes[layer.input_from]
        else:
            inp = prev

        if layer.kind == "conv":
            if len(inp) != 3:
                raise ConfigurationError(f"layer {layer.name!r}: conv needs a 3-D input, got {inp}")
            p = layer.conv
            if inp[2] != p.in_channels:
                raise ConfigurationError(
                    f"layer {layer.name!r}: input has {inp[2]} channels, params expect {p.in_channels}"
                )
            wm = graph.weights.get(layer.name)
            if not isinstance(wm, WeightMatrix):
                raise ConfigurationError(f"layer {layer.name!r}: missing conv weights")
            if wm.kernel != p.kernel or wm.in_channels != p.in_channels or wm.rows != p.out_channels:
                raise ConfigurationError(f"layer {layer.name!r}: weights do not match conv params")
            out = (*p.out_shape(inp[0], inp[1]), p.out_channels)
        elif layer.kind == "relu":
            out = inp
        elif layer.kind in ("maxpool", "avgpool"):
            if len(inp) != 3:
                raise ConfigurationError(f"layer {layer.name!r}: pooling needs a 3-D input, got {inp}")
            h, w, c = inp
            k, s = layer.pool_kernel, layer.pool_stride
            if k > h or k > w:
                raise ConfigurationError(f"layer {layer.name!r}: pooling kernel {k} larger than {h}x{w}")
            out = ((h - k) // s + 1, (w - k) // s + 1, c)
        elif layer.kind == "global_avgpool":
            if len(inp) != 3:
                raise ConfigurationError(f"layer {layer.name!r}: needs a 3-D input, got {inp}")
            out = (inp[2],)
        elif layer.kind == "flatten":
            out = (int(np.prod(inp)),)
        elif layer.kind == "fc":
            fw = graph.weights.get(layer.name)
            if not isinstance(fw, FcWeights):
                raise ConfigurationError(f"layer {layer.name!r}: missing fc weights")
            if len(inp) != 1 or inp[0] != fw.weight.shape[1]:
                raise ConfigurationError(
                    f"layer {layer.name!r}: fc expects a flat {fw.weight.shape[1]}-vector, got {inp}"
                )
            out = (fw.weight.shape[0],)
        else:  # add
            if layer.add_from not in shapes:
                raise ConfigurationError(
                    f"layer {layer.name!r}: add_from {layer.add_from!r} is not an earlier layer"
                )
            if shapes[layer.add_from] != inp:
                raise ConfigurationError(
                    f"layer {layer.name!r}: add shapes differ: {inp} vs {shapes[layer.add_from]}"
                )
            out = inp
        shapes[layer.name] = out
        prev = out
    return shapes


def _check_mask_resolutions(graph: ModelGraph) -> None:
    ih, iw, _ = graph.input_shape
    for layer in graph.enabled_convs():
        oh, ow = graph.shapes[layer.name][:2]
        if ih % oh or iw % ow or ih // oh != iw // ow:
            raise ConfigurationError(
                f"layer {layer.name!r}: output {oh}x{ow} does not divide input {ih}x{iw} "
                f"with an equal ratio per axis"
            )


def _mask_map(graph: ModelGraph, masks) -> dict[str, SpatialMask]:
    enabled = graph.enabled_convs()
    if isinstance(masks, dict):
        mapping = masks
        names = {l.name for l in enabled}
        extra = set(mapping) - names
        if extra:
            raise ConfigurationError(f"masks given for non-sparsifiable layers: {sorted(extra)}")
    else:
        masks = list(masks)
        if len(masks) != len(enabled):
            raise ConfigurationError(
                f"got {len(masks)} masks for {len(enabled)} sparsity-enabled conv layers"
            )
        mapping = {l.name: m for l, m in zip(enabled, masks)}
    for layer in enabled:
        m = mapping.get(layer.name)
        if m is None:
            continue
        oh, ow = graph.shapes[layer.name][:2]
        if (m.height, m.width) != (oh, ow):
            raise ConfigurationError(
                f"layer {layer.name!r}: mask is {m.height}x{m.width}, output is {oh}x{ow}"
            )
    return mapping


def masks_for_graph(graph: ModelGraph, s: float, seed: int, step: int = 0) -> list[SpatialMask]:
    """Propagated masks for the graph's sparsity-enabled convs, in layer order."""
    return propagate_masks(graph.enabled_resolutions(), graph.input_shape[:2], seed, step, s)


def _check_input(graph: ModelGraph, image) -> np.ndarray:
    x = np.ascontiguousarray(image, dtype=np.float32)
    if x.shape != graph.input_shape:
        raise ConfigurationError(f"input shape {x.shape} does not match model {graph.input_shape}")
    return x


def infer(graph: ModelGraph, image: np.ndarray, masks=None, return_activations: bool = False):
    """Run one image through the graph.

    ``masks=None`` runs fully dense.  Otherwise ``masks`` is a list
    aligned with the sparsity-enabled convs (or a dict keyed by layer
    name), and those convs take the mask-skipping path; everything else,
    including disabled convs, runs dense.
    """
    x = _check_input(graph, image)
    mapping = _mask_map(graph, masks) if masks is not None else {}
    acts: dict[str, np.ndarray] = {}
    cur = x
    for i, layer in enumerate(graph.layers):
        src = graph.layer_input_name(i)
        inp = x if src is None else acts[src]
        if layer.kind == "conv":
            cur = sparse_conv2d(
                inp, graph.weights[layer.name], params=layer.conv, mask=mapping.get(layer.name)
            )
        elif layer.kind == "relu":
            cur = relu(inp)
        elif layer.kind == "maxpool":
            cur = pool2d(inp, "max", layer.pool_kernel, layer.pool_stride)
        elif layer.kind == "avgpool":
            cur = pool2d(inp, "avg", layer.pool_kernel, layer.pool_stride)
        elif layer.kind == "global_avgpool":
            cur = global_avg_pool(inp)
        elif layer.kind == "flatten":
            cur = inp.reshape(-1)
        elif layer.kind == "fc":
            fw = graph.weights[layer.name]
            cur = fully_connected(inp, fw.weight, fw.bias)
        else:  # add
            cur = elementwise_add(inp, acts[layer.add_from])
        acts[layer.name] = cur
    if return_activations:
        return cur, acts
    return cur


@dataclass
class LayerCheck:
    name: str
    retained_cols: int
    max_abs_diff: float
    ok: bool


@dataclass
class EquivalenceReport:
    rows: list[LayerCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    def format(self) -> str:
        lines = [f"{'layer':<24} {'retained':>9} {'max|diff|':>12}  status"]
        for r in self.rows:
            status = "ok" if r.ok else f"FAIL (> {self.tol:g})"
            lines.append(f"{r.name:<24} {r.retained_cols:>9} {r.max_abs_diff:>12.3e}  {status}")
        return "\n".join(lines)


def verify_equivalence(graph: ModelGraph, image: np.ndarray, masks, tol: float = 1e-5) -> EquivalenceReport:
    """Compare the fast path against the direct-convolution reference.

    Walks the graph on a reference activation stream computed with the
    per-tap direct convolution (zeroing masked positions explicitly).  At
    every masked conv the fast path runs on the same reference input, so
    each layer is checked in isolation and a failure pinpoints the layer
    at fault rather than an accumulated drift.
    """
    x = _check_input(graph, image)
    mapping = _mask_map(graph, masks) if masks is not None else {}
    rows: list[LayerCheck] = []
    acts: dict[str, np.ndarray] = {}
    cur = x
    for i, layer in enumerate(graph.layers):
        src = graph.layer_input_name(i)
        inp = x if src is None else acts[src]
        if layer.kind == "conv":
            wm = graph.weights[layer.name]
            ref = direct_conv2d(inp, wm.to_filters(), wm.bias, layer.conv)
            m = mapping.get(layer.name)
            if m is not None:
                ref = np.where(m.bits[:, :, None], ref, np.float32(0.0))
                fast = sparse_conv2d(inp, wm, params=layer.conv, mask=m)
                diff = float(np.max(np.abs(fast - ref))) if ref.size else 0.0
                rows.append(
                    LayerCheck(layer.name, m.num_kept, diff, diff <= tol)
                )
            cur = ref
        elif layer.kind == "relu":
            cur = relu(inp)
        elif layer.kind == "maxpool":
            cur = pool2d(inp, "max", layer.pool_kernel, layer.pool_stride)
        elif layer.kind == "avgpool":
            cur = pool2d(inp, "avg", layer.pool_kernel, layer.pool_stride)
        elif layer.kind == "global_avgpool":
            cur = global_avg_pool(inp)
        elif layer.kind == "flatten":
            cur = inp.reshape(-1)
        elif layer.kind == "fc":
            fw = graph.weights[layer.name]
            cur = fully_connected(inp, fw.weight, fw.bias)
        else:
            cur = elementwise_add(inp, acts[layer.add_from])
        acts[layer.name] = cur
    return EquivalenceReport(rows=rows, tol=tol)


# --------------------------------------------------------------------------
# .smod serialization
# --------------------------------------------------------------------------

_SMOD_VERSION = 1


def save_model(graph: ModelGraph) -> bytes:
    blob = bytearray()

    def emit(arr: np.ndarray) -> dict:
        offset = len(blob)
        blob.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return {"offset": offset, "shape": [int(d) for d in arr.shape]}

    layers = []
    for layer in graph.layers:
        entry: dict = {"name": layer.name, "kind": layer.kind}
        if layer.input_from is not None:
            entry["input_from"] = layer.input_from
        if layer.kind == "conv":
            p = layer.conv
            wm = graph.weights[layer.name]
            entry.update(
                kernel=list(p.kernel),
                stride=list(p.stride),
                padding=list(p.padding),
                dilation=list(p.dilation),
                in_channels=p.in_channels,
                out_channels=p.out_channels,
                sparsity_enabled=layer.sparsity_enabled,
                filters=emit(wm.to_filters()),
                bias=emit(wm.bias),
            )
        elif layer.kind in ("maxpool", "avgpool"):
            entry.update(kernel=layer.pool_kernel, stride=layer.pool_stride)
        elif layer.kind == "add":
            entry["from"] = layer.add_from
        elif layer.kind == "fc":
            fw = graph.weights[layer.name]
            entry.update(weight=emit(fw.weight), bias=emit(fw.bias))
        layers.append(entry)

    manifest = {
        "format": "smod",
        "version": _SMOD_VERSION,
        "input": [int(v) for v in graph.input_shape],
        "layers": layers,
    }
    payload = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(payload)) + payload + bytes(blob)


def load_model(data: bytes) -> ModelGraph:
    if len(data) < 8:
        raise ModelFormatError("payload shorter than the length header")
    (mlen,) = struct.unpack_from("<Q", data, 0)
    if 8 + mlen > len(data):
        raise ModelFormatError("truncated manifest")
    try:
        manifest = json.loads(data[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"manifest is not valid JSON: {e}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != "smod":
        raise ModelFormatError("manifest is not a smod manifest")
    if manifest.get("version") != _SMOD_VERSION:
        raise ModelFormatError(f"unsupported smod version {manifest.get('version')}")
    blob = data[8 + mlen:]

    def take(ref, name: str) -> np.ndarray:
        try:
            offset, shape = int(ref["offset"]), [int(d) for d in ref["shape"]]
        except (TypeError, KeyError, ValueError):
            raise ModelFormatError(f"layer {name!r}: malformed blob reference {ref!r}") from None
        count = int(np.prod(shape)) if shape else 1
        if offset < 0 or offset + 4 * count > len(blob):
            raise ModelFormatError(f"layer {name!r}: blob reference out of bounds")
        return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()

    try:
        input_shape = tuple(int(v) for v in manifest["input"])
        entries = manifest["layers"]
    except (KeyError, TypeError, ValueError):
        raise ModelFormatError("manifest is missing input shape or layers") from None

    layers: list[LayerSpec] = []
    weights: dict[str, WeightMatrix | FcWeights] = {}
    for entry in entries:
        try:
            name, kind = entry["name"], entry["kind"]
        except (KeyError, TypeError):
            raise ModelFormatError(f"malformed layer entry {entry!r}") from None
        try:
            if kind == "conv":
                params = ConvParams(
                    kernel=tuple(entry["kernel"]),
                    stride=tuple(entry["stride"]),
                    padding=tuple(entry["padding"]),
                    dilation=tuple(entry["dilation"]),
                    in_channels=int(entry["in_channels"]),
                    out_channels=int(entry["out_channels"]),
                )
                weights[name] = WeightMatrix.from_filters(
                    take(entry["filters"], name), take(entry["bias"], name)
                )
                layers.append(
                    LayerSpec(
                        name=name,
                        kind=kind,
                        conv=params,
                        sparsity_enabled=bool(entry.get("sparsity_enabled", False)),
                        input_from=entry.get("input_from"),
                    )
                )
            elif kind in ("maxpool", "avgpool"):
                layers.append(
                    LayerSpec(
                        name=name,
                        kind=kind,
                        pool_kernel=int(entry["kernel"]),
                        pool_stride=int(entry["stride"]),
                        input_from=entry.get("input_from"),
                    )
                )
            elif kind == "add":
                layers.append(
                    LayerSpec(name=name, kind=kind, add_from=entry["from"], input_from=entry.get("input_from"))
                )
            elif kind == "fc":
                weights[name] = FcWeights(take(entry["weight"], name), take(entry["bias"], name))
                layers.append(LayerSpec(name=name, kind=kind, input_from=entry.get("input_from")))
            elif kind in ("relu", "global_avgpool", "flatten"):
                layers.append(LayerSpec(name=name, kind=kind, input_from=entry.get("input_from")))
            else:
                raise ModelFormatError(f"layer {name!r}: unknown kind {kind!r}")
        except KeyError as e:
            raise ModelFormatError(f"layer {name!r}: missing field {e}") from None

    try:
        return ModelGraph(input_shape=input_shape, layers=layers, weights=weights)
    except ConfigurationError as e:
        raise ModelFormatError(f"inconsistent model: {e}") from None


def save_model_file(graph: ModelGraph, path) -> None:
    with open(path, "wb") as f:
        f.write(save_model(graph))


def load_model_file(path) -> ModelGraph:
    with open(path, "rb") as f:
        return load_model(f.read())

"""Toy-scale training with scheduled random activation masks.

The loop has three stages driven by :class:`~sparseconv.masks.SparsitySchedule`:
a dense warmup, a ramp where masks are resampled every step at the
scheduled sparsity, and a frozen tail that reuses the mask set sampled at
the freeze boundary so the weights settle against one fixed pattern.
Weights themselves stay fully dense throughout.

The forward pass multiplies each masked conv's output (bias included) by
its mask, which matches the inference engine's zero insertion, and the
backward pass treats the mask as the constant it is: no gradient flows
through masked positions.  All layer functions follow the input dtype, so
the finite-difference harness can run the exact same code in float64.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import batch_stream, make_shapes_dataset
from .graph import ModelGraph, _mask_map
from .masks import (
    SparsitySchedule,
    SpatialMask,
    mask_set_digest,
    propagate_masks,
    random_score2d,
    rank_and_mask,
    sparsity_at_step,
)
from .ops import ConfigurationError, ConvParams


# --------------------------------------------------------------------------
# batched layer primitives (dtype-following)
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, params: ConvParams):
    n, h, w, c = x.shape
    kh, kw = params.kernel
    (sh, sw), (ph, pw), (dh, dw) = params.stride, params.padding, params.dilation
    oh, ow = params.out_shape(h, w)
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + w] = x
    col = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for ky in range(kh):
        ys = slice(ky * dh, ky * dh + sh * oh, sh)
        for kx in range(kw):
            col[:, :, :, ky, kx, :] = xp[:, ys, kx * dw:kx * dw + sw * ow:sw, :]
    return col.reshape(n, oh * ow, kh * kw * c), (oh, ow)


def _col2im(dcols: np.ndarray, x_shape, params: ConvParams):
    n, h, w, c = x_shape
    kh, kw = params.kernel
    (sh, sw), (ph, pw), (dh, dw) = params.stride, params.padding, params.dilation
    oh, ow = params.out_shape(h, w)
    dcol = dcols.reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=dcols.dtype)
    for ky in range(kh):
        ys = slice(ky * dh, ky * dh + sh * oh, sh)
        for kx in range(kw):
            dxp[:, ys, kx * dw:kx * dw + sw * ow:sw, :] += dcol[:, :, :, ky, kx, :]
    return dxp[:, ph:ph + h, pw:pw + w, :]


def _pool_windows(x: np.ndarray, k: int):
    # non-overlapping pooling: regroup into (n, oh, ow, k*k, c)
    n, h, w, c = x.shape
    oh, ow = h // k, w // k
    win = x[:, :oh * k, :ow * k, :].reshape(n, oh, k, ow, k, c)
    return win.transpose(0, 1, 3, 2, 4, 5).reshape(n, oh, ow, k * k, c), (oh, ow)


def _zero(dtype):
    return np.zeros((), dtype=dtype)


def graph_params(graph: ModelGraph) -> dict[str, dict[str, np.ndarray]]:
    """Live references to every trainable array, keyed by layer name."""
    params: dict[str, dict[str, np.ndarray]] = {}
    for layer in graph.layers:
        if layer.kind == "conv":
            wm = graph.weights[layer.name]
            params[layer.name] = {"weight": wm.data, "bias": wm.bias}
        elif layer.kind == "fc":
            fw = graph.weights[layer.name]
            params[layer.name] = {"weight": fw.weight, "bias": fw.bias}
    return params


def masked_forward(graph: ModelGraph, inputs: np.ndarray, masks=None, params=None):
    """Batched forward pass with per-conv output masking.

    ``inputs`` is ``(batch, h, w, c)``.  Returns ``(logits, caches)``;
    the caches carry everything the backward pass needs.  ``params`` may
    override the graph's weight arrays (used for float64 shadow runs).
    """
    x = np.asarray(inputs)
    if x.ndim != 4 or x.shape[1:] != graph.input_shape:
        raise ConfigurationError(
            f"expected a (batch, {', '.join(map(str, graph.input_shape))}) input, got {x.shape}"
        )
    mapping = _mask_map(graph, masks) if masks is not None else {}
    if params is None:
        params = graph_params(graph)

    caches = []
    acts: dict[str, np.ndarray] = {}
    cur = x
    for i, layer in enumerate(graph.layers):
        src = graph.layer_input_name(i)
        inp = x if src is None else acts[src]
        cache = {"layer": layer, "src": src}
        if layer.kind == "conv":
            w, b = params[layer.name]["weight"], params[layer.name]["bias"]
            cols, (oh, ow) = _im2col(inp, layer.conv)
            nb, z, patch = cols.shape
            out = (cols.reshape(nb * z, patch) @ w.T).reshape(nb, z, -1) + b
            m = mapping.get(layer.name)
            if m is not None:
                bits = m.bits.ravel()
                out = np.where(bits[None, :, None], out, _zero(out.dtype))
                cache["bits"] = bits
            cache.update(cols=cols, x_shape=inp.shape)
            cur = out.reshape(nb, oh, ow, -1)
        elif layer.kind == "relu":
            cur = np.maximum(inp, 0)
            cache["out"] = cur
        elif layer.kind in ("maxpool", "avgpool"):
            k = layer.pool_kernel
            if k != layer.pool_stride:
                raise ConfigurationError(
                    f"layer {layer.name!r}: training supports non-overlapping pooling only"
                )
            win, (oh, ow) = _pool_windows(inp, k)
            if layer.kind == "maxpool":
                idx = np.argmax(win, axis=3)
                cur = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
                cache.update(idx=idx, x_shape=inp.shape, k=k)
            else:
                cur = win.mean(axis=3)
                cache.update(x_shape=inp.shape, k=k)
        elif layer.kind == "global_avgpool":
            cur = inp.mean(axis=(1, 2))
            cache["x_shape"] = inp.shape
        elif layer.kind == "flatten":
            cur = inp.reshape(inp.shape[0], -1)
            cache["x_shape"] = inp.shape
        elif layer.kind == "fc":
            w, b = params[layer.name]["weight"], params[layer.name]["bias"]
            cur = inp @ w.T + b
            cache["x"] = inp
        else:  # add
            cur = inp + acts[layer.add_from]
        acts[layer.name] = cur
        caches.append(cache)
    return cur, caches


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, dlogits, accuracy)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    picked = np.clip(probs[np.arange(n), labels], 1e-30, None)
    loss = float(-np.log(picked).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    acc = float((logits.argmax(axis=1) == labels).mean())
    return loss, dlogits, acc


def _backward(graph: ModelGraph, caches, dlogits, params):
    grads: dict[str, dict[str, np.ndarray]] = {}
    acc: dict[str, np.ndarray] = {caches[-1]["layer"].name: dlogits}

    def accumulate(name, g):
        if name is None:
            return
        # never update in place: the target may be a view into a cache
        acc[name] = acc[name] + g if name in acc else g

    for cache in reversed(caches):
        layer = cache["layer"]
        d = acc.pop(layer.name, None)
        if d is None:
            continue  # output never consumed; no gradient flows
        if layer.kind == "conv":
            w = params[layer.name]["weight"]
            nb, oh, ow, nf = d.shape
            dflat = d.reshape(nb, oh * ow, nf)
            bits = cache.get("bits")
            if bits is not None:
                dflat = np.where(bits[None, :, None], dflat, _zero(dflat.dtype))
            cols = cache["cols"]
            grads[layer.name] = {
                "weight": np.tensordot(dflat, cols, axes=([0, 1], [0, 1])),
                "bias": dflat.sum(axis=(0, 1)),
            }
            dcols = dflat @ w
            accumulate(cache["src"], _col2im(dcols, cache["x_shape"], layer.conv))
        elif layer.kind == "relu":
            accumulate(cache["src"], d * (cache["out"] > 0))
        elif layer.kind == "maxpool":
            nb, h, w_, c = cache["x_shape"]
            k = cache["k"]
            oh, ow = d.shape[1], d.shape[2]
            dwin = np.zeros((nb, oh, ow, k * k, c), dtype=d.dtype)
            np.put_along_axis(dwin, cache["idx"][:, :, :, None, :], d[:, :, :, None, :], axis=3)
            dx = np.zeros(cache["x_shape"], dtype=d.dtype)
            dx_view = dwin.reshape(nb, oh, ow, k, k, c).transpose(0, 1, 3, 2, 4, 5)
            dx[:, :oh * k, :ow * k, :] = dx_view.reshape(nb, oh * k, ow * k, c)
            accumulate(cache["src"], dx)
        elif layer.kind == "avgpool":
            nb, h, w_, c = cache["x_shape"]
            k = cache["k"]
            oh, ow = d.shape[1], d.shape[2]
            dx = np.zeros(cache["x_shape"], dtype=d.dtype)
            spread = np.broadcast_to(
                d[:, :, None, :, None, :] / (k * k), (nb, oh, k, ow, k, c)
            )
            dx[:, :oh * k, :ow * k, :] = spread.reshape(nb, oh * k, ow * k, c)
            accumulate(cache["src"], dx)
        elif layer.kind == "global_avgpool":
            nb, h, w_, c = cache["x_shape"]
            accumulate(cache["src"], np.broadcast_to(d[:, None, None, :] / (h * w_), cache["x_shape"]))
        elif layer.kind == "flatten":
            accumulate(cache["src"], d.reshape(cache["x_shape"]))
        elif layer.kind == "fc":
            x = cache["x"]
            grads[layer.name] = {"weight": d.T @ x, "bias": d.sum(axis=0)}
            accumulate(cache["src"], d @ params[layer.name]["weight"])
        else:  # add: route to both producers
            accumulate(cache["src"], d)
            accumulate(layer.add_from, d)
    return grads


def loss_and_grads(graph: ModelGraph, inputs, labels, masks=None, params=None):
    """Cross-entropy loss, batch accuracy, and gradients for every weight."""
    if params is None:
        params = graph_params(graph)
    logits, caches = masked_forward(graph, inputs, masks, params=params)
    loss, dlogits, acc = softmax_cross_entropy(logits, np.asarray(labels))
    grads = _backward(graph, caches, dlogits, params)
    return loss, acc, grads


def adam_step(params, grads, state, lr, step, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place on the parameter arrays.

    ``params``/``grads`` are nested name -> slot -> array dicts; ``state``
    holds the first/second moments and is created lazily.
    """
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    for name, slots in grads.items():
        for slot, g in slots.items():
            key = (name, slot)
            p = params[name][slot]
            if key not in m:
                m[key] = np.zeros_like(p, dtype=np.float64)
                v[key] = np.zeros_like(p, dtype=np.float64)
            m[key] = beta1 * m[key] + (1.0 - beta1) * g
            v[key] = beta2 * v[key] + (1.0 - beta2) * np.square(g)
            mhat = m[key] / (1.0 - beta1 ** step)
            vhat = v[key] / (1.0 - beta2 ** step)
            p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


@dataclass
class StepLog:
    step: int
    stage: str
    sparsity: float
    loss: float
    accuracy: float
    mask_digest: str
    zeros_per_layer: tuple


@dataclass
class TrainState:
    graph: ModelGraph
    schedule: SparsitySchedule
    seed: int
    step: int = 0
    optimizer: dict = field(default_factory=dict)
    masks: list | None = None
    frozen_masks: list | None = None


@dataclass
class TrainResult:
    graph: ModelGraph
    frozen_masks: list
    log: list[StepLog]
    state: TrainState


def _sample_masks(graph, resolutions, seed, step, s, mode):
    if mode == "propagated":
        return propagate_masks(resolutions, graph.input_shape[:2], seed, step, s)
    if mode == "independent":
        # ablation path: one stream per (step, layer), no cross-layer alignment
        return [
            rank_and_mask(random_score2d(h, w, seed, step * 8191 + i + 1), s)
            for i, (h, w) in enumerate(resolutions)
        ]
    raise ConfigurationError(f"unknown mask mode {mode!r}")


def train(
    graph: ModelGraph,
    steps: int,
    target_sparsity: float,
    schedule: SparsitySchedule | None = None,
    seed: int = 0,
    lr: float = 1e-4,
    batch_size: int = 64,
    train_data=None,
    mask_mode: str = "propagated",
    log_path=None,
) -> TrainResult:
    """Run the three-stage sparse training loop and return the trained
    graph plus the frozen mask set.

    Weights are updated in place on ``graph``.  ``train_data`` is an
    ``(images, labels)`` pair; by default a 2000-image synthetic shapes
    set matching the graph's input resolution is generated from ``seed``.
    """
    if schedule is None:
        schedule = SparsitySchedule(total_steps=steps, target_sparsity=target_sparsity)
    if schedule.total_steps != steps or schedule.target_sparsity != target_sparsity:
        raise ConfigurationError("schedule disagrees with steps/target_sparsity arguments")
    if train_data is None:
        h, w, c = graph.input_shape
        if c != 1 or h != w:
            raise ConfigurationError("default shapes dataset needs a square 1-channel input")
        train_data = make_shapes_dataset(2000, seed=seed, size=h)
    images, labels = train_data

    resolutions = graph.enabled_resolutions()
    all_ones = [SpatialMask(np.ones((h, w), dtype=bool)) for h, w in resolutions]
    dense_digest = mask_set_digest(all_ones)
    dense_zeros = tuple(0 for _ in resolutions)

    state = TrainState(graph=graph, schedule=schedule, seed=seed)
    params = graph_params(graph)
    batches = batch_stream(images, labels, batch_size, seed)
    log: list[StepLog] = []

    with threadpool_limits(limits=1):
        for t in range(steps):
            s_t = sparsity_at_step(t, schedule)
            if t < schedule.dense_end:
                stage, masks = "dense", None
            elif t < schedule.freeze_start:
                stage = "ramp"
                masks = _sample_masks(graph, resolutions, seed, t, s_t, mask_mode)
            else:
                stage = "frozen"
                if state.frozen_masks is None:
                    state.frozen_masks = _sample_masks(
                        graph, resolutions, seed, t, schedule.target_sparsity, mask_mode
                    )
                masks = state.frozen_masks
            state.masks = masks

            x, y = next(batches)
            loss, acc, grads = loss_and_grads(graph, x, y, masks, params=params)
            adam_step(params, grads, state.optimizer, lr, t + 1)
            state.step = t + 1

            if masks is None:
                digest, zeros = dense_digest, dense_zeros
            else:
                digest = mask_set_digest(masks)
                zeros = tuple(m.num_zero for m in masks)
            log.append(StepLog(t, stage, s_t, loss, acc, digest, zeros))

    if state.frozen_masks is None:
        state.frozen_masks = state.masks if state.masks is not None else all_ones
    if log_path is not None:
        write_training_log(log, log_path)
    return TrainResult(graph=graph, frozen_masks=state.frozen_masks, log=log, state=state)


def write_training_log(log: list[StepLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "stage", "sparsity", "loss", "accuracy"])
        for row in log:
            writer.writerow([row.step, row.stage, repr(row.sparsity), repr(row.loss), repr(row.accuracy)])


def evaluate(graph: ModelGraph, images, labels, masks=None, batch_size: int = 256) -> float:
    """Classification accuracy of the graph (optionally masked) on a dataset."""
    hits = 0
    with threadpool_limits(limits=1):
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            y = labels[start:start + batch_size]
            logits, _ = masked_forward(graph, x, masks)
            hits += int((logits.argmax(axis=1) == y).sum())
    return hits / len(images)

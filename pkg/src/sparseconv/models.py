"""Built-in model graphs with seeded random weights."""

import numpy as np

from .graph import FcWeights, LayerSpec, ModelGraph
from .ops import ConvParams, WeightMatrix


def _conv_weights(rng, kh, kw, c, n, gain=1.0) -> WeightMatrix:
    std = gain * np.sqrt(2.0 / (kh * kw * c))
    filters = rng.normal(0.0, std, size=(kh, kw, c, n)).astype(np.float32)
    return WeightMatrix.from_filters(filters, np.zeros(n, dtype=np.float32))


def _fc_weights(rng, in_features, out_features) -> FcWeights:
    std = np.sqrt(1.0 / in_features)
    w = rng.normal(0.0, std, size=(out_features, in_features)).astype(np.float32)
    return FcWeights(w, np.zeros(out_features, dtype=np.float32))


def toy_cnn(seed: int = 0) -> ModelGraph:
    """Small 3-conv classifier for the synthetic shapes task (32x32x1 -> 3)."""
    rng = np.random.default_rng(seed)
    layers, weights = [], {}

    def conv(name, k, s, p, cin, cout):
        params = ConvParams(kernel=k, stride=s, padding=p, in_channels=cin, out_channels=cout)
        layers.append(LayerSpec(name=name, kind="conv", conv=params, sparsity_enabled=True))
        weights[name] = _conv_weights(rng, *params.kernel, cin, cout)

    conv("conv1", 3, 1, 1, 1, 8)
    layers.append(LayerSpec(name="relu1", kind="relu"))
    layers.append(LayerSpec(name="pool1", kind="maxpool", pool_kernel=2, pool_stride=2))
    conv("conv2", 3, 1, 1, 8, 16)
    layers.append(LayerSpec(name="relu2", kind="relu"))
    layers.append(LayerSpec(name="pool2", kind="maxpool", pool_kernel=2, pool_stride=2))
    conv("conv3", 3, 1, 1, 16, 32)
    layers.append(LayerSpec(name="relu3", kind="relu"))
    layers.append(LayerSpec(name="gap", kind="global_avgpool"))
    layers.append(LayerSpec(name="fc", kind="fc"))
    weights["fc"] = _fc_weights(rng, 32, 3)
    return ModelGraph(input_shape=(32, 32, 1), layers=layers, weights=weights)


def two_conv_net(seed: int = 0) -> ModelGraph:
    """Tiny 2-conv net (8x8x1 -> 3) sized for finite-difference checking."""
    rng = np.random.default_rng(seed)
    layers, weights = [], {}
    p1 = ConvParams(kernel=3, stride=1, padding=1, in_channels=1, out_channels=4)
    layers.append(LayerSpec(name="conv1", kind="conv", conv=p1, sparsity_enabled=True))
    weights["conv1"] = _conv_weights(rng, 3, 3, 1, 4)
    layers.append(LayerSpec(name="relu1", kind="relu"))
    layers.append(LayerSpec(name="pool1", kind="avgpool", pool_kernel=2, pool_stride=2))
    p2 = ConvParams(kernel=3, stride=1, padding=1, in_channels=4, out_channels=8)
    layers.append(LayerSpec(name="conv2", kind="conv", conv=p2, sparsity_enabled=True))
    weights["conv2"] = _conv_weights(rng, 3, 3, 4, 8)
    layers.append(LayerSpec(name="relu2", kind="relu"))
    layers.append(LayerSpec(name="gap", kind="global_avgpool"))
    layers.append(LayerSpec(name="fc", kind="fc"))
    weights["fc"] = _fc_weights(rng, 8, 3)
    return ModelGraph(input_shape=(8, 8, 1), layers=layers, weights=weights)


def resnet18_shape(seed: int = 0, num_classes: int = 1000) -> ModelGraph:
    """ResNet18-shaped 4-stage stack with random weights (224x224x3 input).

    Latency benchmarking only cares about layer geometry, so the weights
    are random.  The stem pool is 2x2/2 (instead of an overlapping 3x3/2)
    to keep every stage resolution an exact divisor of the input, which
    the mask propagation requires; stage shapes are unchanged.  All 3x3
    convs participate in sparsity; the 1x1 residual downsample convs stay
    dense, since their runtime share is negligible.  Residual branch
    tails are damped so activations stay O(1) through the stack.
    """
    rng = np.random.default_rng(seed)
    layers, weights = [], {}

    def conv(name, k, s, p, cin, cout, enabled, input_from=None, gain=1.0):
        params = ConvParams(kernel=k, stride=s, padding=p, in_channels=cin, out_channels=cout)
        layers.append(
            LayerSpec(name=name, kind="conv", conv=params, sparsity_enabled=enabled, input_from=input_from)
        )
        weights[name] = _conv_weights(rng, *params.kernel, cin, cout, gain=gain)

    conv("conv1", 7, 2, 3, 3, 64, enabled=True)
    layers.append(LayerSpec(name="relu1", kind="relu"))
    layers.append(LayerSpec(name="pool1", kind="maxpool", pool_kernel=2, pool_stride=2))
    block_input = "pool1"

    stage_channels = (64, 128, 256, 512)
    cin = 64
    for si, cout in enumerate(stage_channels, start=1):
        for bi in range(2):
            base = f"layer{si}_{bi}"
            downsamples = bi == 0 and si > 1
            stride = 2 if downsamples else 1
            conv(f"{base}_conv1", 3, stride, 1, cin, cout, enabled=True)
            layers.append(LayerSpec(name=f"{base}_relu1", kind="relu"))
            conv(f"{base}_conv2", 3, 1, 1, cout, cout, enabled=True, gain=0.25)
            if downsamples:
                conv(f"{base}_down", 1, 2, 0, cin, cout, enabled=False, input_from=block_input)
                layers.append(
                    LayerSpec(name=f"{base}_add", kind="add", add_from=f"{base}_conv2")
                )
            else:
                layers.append(
                    LayerSpec(
                        name=f"{base}_add", kind="add", add_from=block_input,
                        input_from=f"{base}_conv2",
                    )
                )
            layers.append(LayerSpec(name=f"{base}_relu2", kind="relu"))
            block_input = f"{base}_relu2"
            cin = cout

    layers.append(LayerSpec(name="gap", kind="global_avgpool"))
    layers.append(LayerSpec(name="fc", kind="fc"))
    weights["fc"] = _fc_weights(rng, 512, num_classes)
    return ModelGraph(input_shape=(224, 224, 3), layers=layers, weights=weights)


BUILTINS = {
    "toy-cnn": toy_cnn,
    "two-conv": two_conv_net,
    "resnet18-shape": resnet18_shape,
}


def build_builtin(name: str, seed: int = 0) -> ModelGraph:
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin model {name!r}; available: {', '.join(sorted(BUILTINS))}")
    return BUILTINS[name](seed=seed)

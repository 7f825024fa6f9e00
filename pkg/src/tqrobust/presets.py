"""Ready-made layer stacks and quantization schemes."""

from __future__ import annotations

from typing import Sequence

from .model import LayerSpec, Model
from .quantize import QuantizerSpec

_ID = QuantizerSpec()


def _qrelu(bits: int) -> QuantizerSpec:
    return QuantizerSpec(kind="quantized_relu", bits=bits)


# scheme name -> (weight quantizer, activation quantizer for relu layers)
SCHEMES: dict[str, tuple[QuantizerSpec, QuantizerSpec]] = {
    "fp": (_ID, _ID),
    "ternary": (QuantizerSpec(kind="ternary"), _ID),
    "stq": (QuantizerSpec(kind="stochastic_ternary"), _ID),
    "binary": (QuantizerSpec(kind="binary"), _ID),
    "s_binary": (QuantizerSpec(kind="stochastic_binary"), _ID),
    "2bit": (QuantizerSpec(kind="fixed_point", bits=2), _qrelu(2)),
    "4bit": (QuantizerSpec(kind="fixed_point", bits=4), _qrelu(4)),
    "8bit": (QuantizerSpec(kind="fixed_point", bits=8), _qrelu(8)),
}

WEIGHTED = ("dense", "conv2d", "depthwise_conv2d", "separable_conv2d")


def apply_scheme(layers: Sequence[LayerSpec], scheme: str) -> list[LayerSpec]:
    """Attach a named scheme's quantizers.

    Weighted layers get the weight quantizer, relu layers the activation
    quantizer. Batch norm, sigmoid and the logit head stay full precision.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    wq, aq = SCHEMES[scheme]
    out = []
    for spec in layers:
        upd = {}
        if spec.kind in WEIGHTED:
            upd["weight_quantizer"] = wq
        if spec.kind == "relu":
            upd["activation_quantizer"] = aq
        out.append(spec.model_copy(update=upd))
    return out


def linear(input_dim: int, num_classes: int, use_bias: bool = True) -> list[LayerSpec]:
    return [LayerSpec(kind="dense", units=num_classes, use_bias=use_bias), LayerSpec(kind="softmax_out")]


def mlp(
    input_dim: int,
    num_classes: int,
    hidden: Sequence[int] = (16, 16),
    activation: str = "relu",
    batch_norm: bool = False,
) -> list[LayerSpec]:
    layers = []
    for h in hidden:
        layers.append(LayerSpec(kind="dense", units=h))
        if batch_norm:
            layers.append(LayerSpec(kind="batch_norm"))
        layers.append(LayerSpec(kind=activation))
    layers += [LayerSpec(kind="dense", units=num_classes), LayerSpec(kind="softmax_out")]
    return layers


def tiny_cnn(num_classes: int, width: int = 8, hidden: int = 32) -> list[LayerSpec]:
    """Six conv-type layers (one depthwise, one separable), a residual add,
    batch norm with relu/sigmoid activations, then three dense layers.

    At 8x8x1 input and the default widths this is about 5.7k parameters.
    """
    w = width
    return [
        LayerSpec(kind="conv2d", filters=w),  # 0
        LayerSpec(kind="batch_norm"),
        LayerSpec(kind="relu"),  # 2
        LayerSpec(kind="depthwise_conv2d"),
        LayerSpec(kind="batch_norm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="residual_add", source=2),  # 6
        LayerSpec(kind="separable_conv2d", filters=2 * w),
        LayerSpec(kind="batch_norm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="conv2d", filters=2 * w, stride=2),
        LayerSpec(kind="batch_norm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="depthwise_conv2d"),
        LayerSpec(kind="batch_norm"),
        LayerSpec(kind="sigmoid"),
        LayerSpec(kind="conv2d", filters=w, kernel_size=1),
        LayerSpec(kind="batch_norm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", units=hidden),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", units=hidden),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", units=num_classes),
        LayerSpec(kind="softmax_out"),
    ]


PRESETS = ("linear", "mlp", "tiny_cnn")


def build(
    preset: str,
    input_shape: Sequence[int],
    num_classes: int,
    scheme: str = "fp",
    seed: int = 0,
    hidden: Sequence[int] = (16, 16),
    width: int = 8,
) -> Model:
    input_shape = tuple(input_shape)
    flat = 1
    for s in input_shape:
        flat *= s
    if preset == "linear":
        layers = linear(flat, num_classes)
    elif preset == "mlp":
        layers = mlp(flat, num_classes, hidden)
    elif preset == "tiny_cnn":
        layers = tiny_cnn(num_classes, width, hidden[0] if hidden else 32)
    else:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    if preset != "tiny_cnn" and len(input_shape) != 1:
        layers = [LayerSpec(kind="flatten")] + layers
    return Model(apply_scheme(layers, scheme), input_shape, seed=seed)

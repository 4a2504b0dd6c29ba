"""A small deterministic CNN inference engine with a fixed-point simulation path.

Tensors are float64 numpy arrays in NCHW order (``(N, features)`` after a
fully connected layer). In the fixed-point path weights and biases are
quantized once, every feature map is quantized where it leaves its layer, and
multiply-accumulate inside a layer stays in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidSampleError, ModelError
from .fixedpoint import FixedPointFormat, quantize_array
from .quantizers import StatsAccumulator

PARAM_KINDS = ("conv", "fc")
LAYER_KINDS = ("conv", "fc", "relu", "maxpool", "avgpool", "softmax")
INPUT_KEY = "input"
BATCH = 256


@dataclass
class LayerSpec:
    name: str
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    kernel: int = 2

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass
class NetworkModel:
    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = validate(self)

    @property
    def param_layers(self) -> list:
        return [layer for layer in self.layers if layer.parameterized]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def activation_index(self, name: str) -> int:
        """Index of the layer whose output is the named layer's feature map.

        A parameterized layer's feature map is taken after any ReLU that
        directly follows it.
        """
        idx = next(i for i, layer in enumerate(self.layers) if layer.name == name)
        while idx + 1 < len(self.layers) and self.layers[idx + 1].kind == "relu":
            idx += 1
        return idx

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.shapes[-1]))


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def validate(model: NetworkModel) -> list:
    """Check the layer chain and return each layer's per-sample output shape."""
    if len(model.input_shape) != 3:
        raise ModelError(f"input shape must be (C, H, W), got {model.input_shape}")
    seen = set()
    shape = model.input_shape
    shapes = []
    for layer in model.layers:
        if layer.kind not in LAYER_KINDS:
            raise ModelError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
        if layer.name in seen or layer.name == INPUT_KEY:
            raise ModelError(f"layer name {layer.name!r} is reserved or duplicated")
        seen.add(layer.name)
        if layer.parameterized:
            if layer.weight is None or layer.bias is None:
                raise ModelError(f"layer {layer.name!r}: missing weight or bias")
            layer.weight = np.asarray(layer.weight, dtype=np.float64)
            layer.bias = np.asarray(layer.bias, dtype=np.float64)
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ModelError(f"layer {layer.name!r}: parameters must be finite")
        if layer.kind == "conv":
            if layer.weight.ndim != 4 or len(shape) != 3:
                raise ModelError(f"layer {layer.name!r}: conv needs a 4-d weight and a CHW input")
            o, c, kh, kw = layer.weight.shape
            if c != shape[0]:
                raise ModelError(
                    f"layer {layer.name!r}: weight expects {c} input channels, got {shape[0]}"
                )
            if layer.bias.shape != (o,):
                raise ModelError(f"layer {layer.name!r}: bias shape {layer.bias.shape} != ({o},)")
            if layer.stride < 1 or layer.padding < 0:
                raise ModelError(f"layer {layer.name!r}: bad stride/padding")
            h = _conv_out(shape[1], kh, layer.stride, layer.padding)
            w = _conv_out(shape[2], kw, layer.stride, layer.padding)
            if h < 1 or w < 1:
                raise ModelError(f"layer {layer.name!r}: kernel larger than padded input")
            shape = (o, h, w)
        elif layer.kind == "fc":
            flat = int(np.prod(shape))
            if layer.weight.ndim != 2 or layer.weight.shape[1] != flat:
                raise ModelError(
                    f"layer {layer.name!r}: weight shape {layer.weight.shape} does not accept {flat} inputs"
                )
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ModelError(f"layer {layer.name!r}: bias shape mismatch")
            shape = (layer.weight.shape[0],)
        elif layer.kind in ("maxpool", "avgpool"):
            if len(shape) != 3:
                raise ModelError(f"layer {layer.name!r}: pooling needs a CHW input")
            if layer.kernel < 1 or layer.stride < 1:
                raise ModelError(f"layer {layer.name!r}: bad pooling window")
            h = _conv_out(shape[1], layer.kernel, layer.stride, 0)
            w = _conv_out(shape[2], layer.kernel, layer.stride, 0)
            if h < 1 or w < 1:
                raise ModelError(f"layer {layer.name!r}: pooling window larger than input")
            shape = (shape[0], h, w)
        shapes.append(shape)
    return shapes


# -- layer kernels ---------------------------------------------------------------


def conv2d(x, weight, bias, stride=1, padding=0):
    """im2col convolution; ``x`` is (N, C, H, W), ``weight`` is (O, C, kh, kw)."""
    o, c, kh, kw = weight.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(o, -1).T + bias
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def pool2d(x, kernel, stride, op):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return op(win, axis=(4, 5))


def softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _apply(layer: LayerSpec, x, weight=None, bias=None):
    weight = layer.weight if weight is None else weight
    bias = layer.bias if bias is None else bias
    if layer.kind == "conv":
        return conv2d(x, weight, bias, layer.stride, layer.padding)
    if layer.kind == "fc":
        return x.reshape(x.shape[0], -1) @ weight.T + bias
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "maxpool":
        return pool2d(x, layer.kernel, layer.stride, np.max)
    if layer.kind == "avgpool":
        return pool2d(x, layer.kernel, layer.stride, np.mean)
    if layer.kind == "softmax":
        return softmax(x.reshape(x.shape[0], -1))
    raise ModelError(f"unknown layer kind {layer.kind!r}")


def _as_batch(model: NetworkModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape == model.input_shape:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ModelError(f"input shape {x.shape} does not match model input {model.input_shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidSampleError("input contains non-finite values")
    return x


# -- quantization config -----------------------------------------------------------


@dataclass(frozen=True)
class LayerQuant:
    weight_fl: int
    weight_bw: int
    bias_fl: int
    bias_bw: int
    # fm_* left as None keeps the feature map in floating point
    fm_fl: int | None = None
    fm_bw: int | None = None
    fm_signed: bool | None = None

    def __post_init__(self):
        FixedPointFormat(self.weight_bw, self.weight_fl)
        FixedPointFormat(self.bias_bw, self.bias_fl)
        if (self.fm_fl is None) != (self.fm_bw is None):
            raise ValueError("fm_fl and fm_bw must both be set or both be None")
        if self.fm_bw is not None:
            FixedPointFormat(self.fm_bw, self.fm_fl)
            if self.fm_signed is None:
                raise ValueError("fm_signed must be set with a feature-map format")

    @property
    def weight_format(self) -> FixedPointFormat:
        return FixedPointFormat(self.weight_bw, self.weight_fl, True)

    @property
    def bias_format(self) -> FixedPointFormat:
        return FixedPointFormat(self.bias_bw, self.bias_fl, True)

    @property
    def fm_format(self) -> FixedPointFormat | None:
        if self.fm_bw is None:
            return None
        return FixedPointFormat(self.fm_bw, self.fm_fl, bool(self.fm_signed))


@dataclass(frozen=True)
class QuantConfig:
    layers: dict
    input_format: FixedPointFormat | None = None
    scheme: str = "WQ_FQ"
    notes: tuple = field(default=(), compare=False)

    def entry(self, name: str) -> LayerQuant:
        return self.layers[name]

    def with_layer(self, name: str, **changes) -> QuantConfig:
        layers = dict(self.layers)
        layers[name] = replace(layers[name], **changes)
        return replace(self, layers=layers)

    def check(self, model: NetworkModel) -> None:
        missing = [layer.name for layer in model.param_layers if layer.name not in self.layers]
        if missing:
            raise ModelError(f"quantization config has no entry for layers {missing}")


# -- forward passes -------------------------------------------------------------------


def _batched(fn, x, batch=BATCH):
    parts = [fn(x[i : i + batch]) for i in range(0, x.shape[0], batch)]
    return [np.concatenate(p, axis=0) for p in zip(*parts)]


def forward_float(model: NetworkModel, inputs) -> list:
    """Outputs of every layer, in layer order."""
    x = _as_batch(model, inputs)

    def run(xb):
        outs = []
        for layer in model.layers:
            xb = _apply(layer, xb)
            outs.append(xb)
        return outs

    return _batched(run, x)


def _quant_points(model: NetworkModel, q: QuantConfig) -> dict:
    points = {}
    for layer in model.param_layers:
        fmt = q.entry(layer.name).fm_format
        if fmt is not None:
            points[model.activation_index(layer.name)] = fmt
    return points


def fixed_grids(model: NetworkModel, q: QuantConfig) -> list:
    """Fixed-point format each layer's output lies on in :func:`forward_fixed` (None = real-valued)."""
    points = _quant_points(model, q)
    grids = []
    current = q.input_format
    for idx, layer in enumerate(model.layers):
        if layer.kind in PARAM_KINDS or layer.kind == "softmax":
            current = None
        current = points.get(idx, current)
        grids.append(current)
    return grids


def forward_fixed(model: NetworkModel, inputs, q: QuantConfig) -> list:
    """Fixed-point simulation; returns every layer's output like :func:`forward_float`.

    Feature maps are quantized at the output of their layer (after the ReLU
    that follows it, if any). Average pooling re-quantizes to the incoming
    format so every intermediate tensor stays on a grid. Softmax is real-valued.
    """
    q.check(model)
    x = _as_batch(model, inputs)
    params = {}
    for layer in model.param_layers:
        e = q.entry(layer.name)
        params[layer.name] = (
            quantize_array(layer.weight, e.weight_format),
            quantize_array(layer.bias, e.bias_format),
        )
    grids = fixed_grids(model, q)
    requant = set(_quant_points(model, q))
    requant.update(
        i for i, layer in enumerate(model.layers) if layer.kind == "avgpool" and grids[i] is not None
    )

    def run(xb):
        if q.input_format is not None:
            xb = quantize_array(xb, q.input_format)
        outs = []
        for idx, layer in enumerate(model.layers):
            if layer.parameterized:
                xb = _apply(layer, xb, *params[layer.name])
            else:
                xb = _apply(layer, xb)
            if idx in requant:
                xb = quantize_array(xb, grids[idx])
            outs.append(xb)
        return outs

    return _batched(run, x)


# -- calibration and network metrics ------------------------------------------------


def activation_points(model: NetworkModel) -> dict:
    """Map of feature-map name to the layer index producing it (``input`` is -1)."""
    points = {INPUT_KEY: -1}
    for layer in model.param_layers:
        points[layer.name] = model.activation_index(layer.name)
    return points


def capture_activations(model: NetworkModel, inputs, names=None) -> dict:
    """Float feature maps at every quantization point, flattened over the batch."""
    x = _as_batch(model, inputs)
    points = activation_points(model)
    names = list(points) if names is None else list(names)
    outs = forward_float(model, x)
    return {n: (x if points[n] < 0 else outs[points[n]]).ravel() for n in names}


def accumulate_calibration(model: NetworkModel, inputs) -> dict:
    x = _as_batch(model, inputs)
    points = activation_points(model)
    accs = {n: StatsAccumulator() for n in points}
    for i in range(0, x.shape[0], BATCH):
        xb = x[i : i + BATCH]
        outs = forward_float(model, xb)
        for n, idx in points.items():
            accs[n].update(xb if idx < 0 else outs[idx])
    return accs


def capture_calibration(model: NetworkModel, inputs) -> dict:
    """Zero-excluded activation statistics for the input and each parameterized layer.

    Raises :class:`DegenerateStatsError` naming the first layer whose
    activations are all zero.
    """
    x = _as_batch(model, inputs)
    if x.shape[0] < 1:
        raise InvalidSampleError("calibration needs at least one input")
    return {n: acc.finalize(layer=n) for n, acc in accumulate_calibration(model, x).items()}


def topk_agreement(model: NetworkModel, q: QuantConfig, inputs, k: int = 1, reference=None) -> float:
    """Fraction of inputs whose float top-1 class is within the fixed-point top-``k``.

    Ties rank the lower class index first in both paths.
    """
    x = _as_batch(model, inputs)
    if x.shape[0] == 0:
        raise InvalidSampleError("agreement needs at least one input")
    if reference is None:
        reference = np.argmax(forward_float(model, x)[-1].reshape(x.shape[0], -1), axis=1)
    fixed = forward_fixed(model, x, q)[-1].reshape(x.shape[0], -1)
    if k == 1:
        hits = np.argmax(fixed, axis=1) == reference
    else:
        # stable sort on negated scores keeps lower indices first among ties
        order = np.argsort(-fixed, axis=1, kind="stable")[:, :k]
        hits = np.any(order == reference[:, None], axis=1)
    return float(np.count_nonzero(hits)) / x.shape[0]


def top1_agreement(model: NetworkModel, q: QuantConfig, inputs, reference=None) -> float:
    return topk_agreement(model, q, inputs, 1, reference)


def float_top1(model: NetworkModel, inputs) -> np.ndarray:
    x = _as_batch(model, inputs)
    return np.argmax(forward_float(model, x)[-1].reshape(x.shape[0], -1), axis=1)


def generous_config(model: NetworkModel, bit_width: int = 32, fl: int = 26) -> QuantConfig:
    """A config whose quantization noise is negligible (range +-32 at the default FL)."""
    layers = {}
    for layer in model.param_layers:
        idx = model.activation_index(layer.name)
        signed = model.layers[idx].kind != "relu"
        layers[layer.name] = LayerQuant(fl, bit_width, fl, bit_width, fl, bit_width, signed)
    return QuantConfig(layers, FixedPointFormat(bit_width, fl, True), scheme="WQ_FQ")


def quantized_sqnr(reference, fixed) -> float:
    """SQNR in dB between a float feature map and its fixed-point counterpart."""
    ref = np.asarray(reference, dtype=np.float64).ravel()
    diff = ref - np.asarray(fixed, dtype=np.float64).ravel()
    signal = float(np.dot(ref, ref))
    noise = float(np.dot(diff, diff))
    if signal == 0:
        raise InvalidSampleError("SQNR is undefined for a zero-power signal")
    return math.inf if noise == 0 else 10.0 * math.log10(signal / noise)

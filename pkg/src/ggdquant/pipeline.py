"""Network-level quantization flows: designing configs, SQNR floors and reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ggd
from .errors import DegenerateStatsError
from .fixedpoint import FixedPointFormat, quantize_tensor, sqnr_db
from .netsim import (
    INPUT_KEY,
    LayerQuant,
    NetworkModel,
    QuantConfig,
    activation_points,
    capture_activations,
    forward_fixed,
    forward_float,
    quantized_sqnr,
    top1_agreement,
    topk_agreement,
)
from .quantizers import (
    FlSearchConfig,
    Mode,
    TensorKind,
    quantize_fm,
    quantize_weights_layer,
    ristretto_fl,
)

SCHEMES = ("wq", "wq-fq", "ristretto")
SCHEME_TAGS = ("WQ", "WQ+", "WQ_FQ", "WQ_FQ+", "WQ+_FQ", "WQ+_FQ+", "ristretto")


@dataclass
class BitWidths:
    weights: int = 8
    fm: int = 8
    bias: int | None = None
    weight_overrides: dict = field(default_factory=dict)
    fm_overrides: dict = field(default_factory=dict)

    def weight_bw(self, name: str) -> int:
        return self.weight_overrides.get(name, self.weights)

    def bias_bw(self, name: str) -> int:
        return self.weight_overrides.get(name, self.weights if self.bias is None else self.bias)

    def fm_bw(self, name: str) -> int:
        return self.fm_overrides.get(name, self.fm)


def tag_after_bft(tag: str, target: str) -> str:
    if target == "weights":
        return {"WQ": "WQ+", "WQ_FQ": "WQ+_FQ"}.get(tag, tag)
    return {"WQ_FQ": "WQ_FQ+", "WQ+_FQ": "WQ+_FQ+"}.get(tag, tag)


# -- per-layer designs ----------------------------------------------------------


def design_weights(model: NetworkModel, bws: BitWidths, k_w: int = 2, ristretto: bool = False) -> dict:
    """Weight and bias FLs per parameterized layer: name -> (weight_fl, bias_fl)."""
    out = {}
    for layer in model.param_layers:
        fls = []
        for arr, bw in ((layer.weight, bws.weight_bw(layer.name)), (layer.bias, bws.bias_bw(layer.name))):
            max_abs = float(np.max(np.abs(arr)))
            if max_abs == 0:
                # an all-zero tensor is exact at any FL
                fls.append(bw - 1)
            elif ristretto:
                fls.append(ristretto_fl(max_abs, bw, TensorKind.WEIGHT))
            else:
                fls.append(quantize_weights_layer(arr, FlSearchConfig(bw, k_w)).fractional_length)
        out[layer.name] = tuple(fls)
    return out


def design_feature_maps(
    stats: dict, activations: dict | None, bws: BitWidths, mode=Mode.DEFAULT, ristretto: bool = False
) -> dict:
    """FL and signedness per feature map: name -> (fl, signed, LayerQuantResult or None)."""
    out = {}
    for name, st in stats.items():
        bw = bws.fm_bw(name)
        signed = not st.single_sided
        if ristretto:
            out[name] = (ristretto_fl(st.max_abs, bw, TensorKind.FEATURE_MAP, signed), signed, None)
            continue
        samples = None if activations is None else activations[name]
        res = quantize_fm(samples, st, FlSearchConfig(bw, mode=Mode(mode)))
        out[name] = (res.fractional_length, signed, res)
    return out


def assemble_config(model, weight_fls, fm_design, bws: BitWidths, scheme: str) -> QuantConfig:
    layers = {}
    for layer in model.param_layers:
        wfl, bfl = weight_fls[layer.name]
        kwargs = {}
        if fm_design is not None:
            fl, signed, _ = fm_design[layer.name]
            kwargs = dict(fm_fl=fl, fm_bw=bws.fm_bw(layer.name), fm_signed=signed)
        layers[layer.name] = LayerQuant(
            wfl, bws.weight_bw(layer.name), bfl, bws.bias_bw(layer.name), **kwargs
        )
    input_format = None
    if fm_design is not None and INPUT_KEY in fm_design:
        fl, signed, _ = fm_design[INPUT_KEY]
        input_format = FixedPointFormat(bws.fm_bw(INPUT_KEY), fl, signed)
    return QuantConfig(layers, input_format, scheme=scheme)


# -- per-layer SQNR ------------------------------------------------------------------


def _sqnr(xs, fmt) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    if not np.any(xs):
        return math.inf
    return sqnr_db(quantize_tensor(xs, fmt)[1])


def weight_sqnr(model: NetworkModel, q: QuantConfig) -> dict:
    return {
        layer.name: (
            _sqnr(layer.weight, q.entry(layer.name).weight_format),
            _sqnr(layer.bias, q.entry(layer.name).bias_format),
        )
        for layer in model.param_layers
    }


def fm_formats(q: QuantConfig) -> dict:
    fmts = {INPUT_KEY: q.input_format}
    fmts.update({n: e.fm_format for n, e in q.layers.items()})
    return fmts


def fm_sqnr(q: QuantConfig, activations: dict) -> dict:
    """SQNR of each feature map quantized in isolation on calibration activations."""
    return {
        name: _sqnr(activations[name], fmt)
        for name, fmt in fm_formats(q).items()
        if fmt is not None and name in activations
    }


def fm_distortions(q: QuantConfig, stats: dict, activations: dict | None) -> dict:
    """Predicted (closed-form) and empirical per-sample MSE over non-zero activations."""
    out = {}
    for name, fmt in fm_formats(q).items():
        if fmt is None or name not in stats:
            continue
        st = stats[name]
        levels = 1 << fmt.bit_width
        support = fmt.step * levels / 2.0 if fmt.signed else fmt.step * levels
        n_sym = levels if fmt.signed else 2 * levels
        try:
            parts = []
            for group in ((st.neg, st.pos) if fmt.signed else (st.pos,)):
                if group.count:
                    p = ggd.estimate_from_moments(group.mean, group.var)
                    parts.append((group.count, ggd.predicted_distortion(n_sym, support, p)))
            predicted = sum(c * d for c, d in parts) / sum(c for c, _ in parts)
        except (DegenerateStatsError, ValueError, ZeroDivisionError):
            predicted = None
        empirical = None
        if activations is not None and name in activations:
            a = activations[name]
            nz = a[a != 0]
            if nz.size:
                _, err = quantize_tensor(nz, fmt)
                empirical = err.mse
        out[name] = (predicted, empirical)
    return out


# -- whole-network flows ----------------------------------------------------------------


@dataclass
class QuantizeResult:
    config: QuantConfig
    promoted_weights: list = field(default_factory=list)
    promoted_fm: list = field(default_factory=list)


def quantize_network(
    model: NetworkModel,
    stats: dict,
    activations: dict | None,
    scheme: str,
    bws: BitWidths,
    mode=Mode.DEFAULT,
    k_w: int = 2,
    weights_from: QuantConfig | None = None,
    sqnr_floor_weights: float | None = None,
    sqnr_floor_fm: float | None = None,
    fallback_bw: int = 8,
) -> QuantizeResult:
    """Run the weight and feature-map algorithms (or the max-based baseline) per layer.

    Layers whose SQNR falls below a floor have their bit width raised to
    ``fallback_bw`` and are designed again.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if Mode(mode) is Mode.DEFAULT and scheme == "wq-fq" and activations is None:
        raise ValueError("default mode needs calibration activations")
    bws = replace(bws, weight_overrides=dict(bws.weight_overrides), fm_overrides=dict(bws.fm_overrides))
    ristretto = scheme == "ristretto"
    tag = {"wq": "WQ", "wq-fq": "WQ_FQ", "ristretto": "ristretto"}[scheme]

    def build():
        if weights_from is not None:
            weight_fls = {n: (e.weight_fl, e.bias_fl) for n, e in weights_from.layers.items()}
            for n, e in weights_from.layers.items():
                bws.weight_overrides.setdefault(n, e.weight_bw)
        else:
            weight_fls = design_weights(model, bws, k_w, ristretto)
        fm = None if scheme == "wq" else design_feature_maps(stats, activations, bws, mode, ristretto)
        t = tag
        if weights_from is not None and weights_from.scheme in ("WQ+", "WQ+_FQ", "WQ+_FQ+"):
            t = "WQ+" if scheme == "wq" else "WQ+_FQ"
        return assemble_config(model, weight_fls, fm, bws, t)

    q = build()
    result = QuantizeResult(q)
    if sqnr_floor_weights is not None and weights_from is None:
        for name, (s, _) in weight_sqnr(model, q).items():
            if s < sqnr_floor_weights and bws.weight_bw(name) < fallback_bw:
                bws.weight_overrides[name] = fallback_bw
                result.promoted_weights.append(name)
    if sqnr_floor_fm is not None and scheme != "wq" and activations is not None:
        for name, s in fm_sqnr(q, activations).items():
            if s < sqnr_floor_fm and bws.fm_bw(name) < fallback_bw:
                bws.fm_overrides[name] = fallback_bw
                result.promoted_fm.append(name)
    if result.promoted_weights or result.promoted_fm:
        result.config = build()
    return result


def eval_set_descriptor(inputs, label: str = "") -> dict:
    x = np.asarray(inputs)
    return {"label": label, "count": int(x.shape[0]), "shape": list(x.shape[1:])}


def build_report(
    model: NetworkModel,
    q: QuantConfig,
    stats: dict | None = None,
    activations: dict | None = None,
    eval_inputs=None,
    eval_label: str = "",
    promoted: QuantizeResult | None = None,
) -> dict:
    """Per-layer and network-level metrics as a plain dict (see :mod:`ggdquant.formats`)."""
    wsq = weight_sqnr(model, q)
    fsq = fm_sqnr(q, activations) if activations is not None else {}
    dist = fm_distortions(q, stats, activations) if stats is not None else {}
    network = None
    if eval_inputs is not None:
        x = np.asarray(eval_inputs, dtype=np.float64)
        float_outs = forward_float(model, x)
        fixed_outs = forward_fixed(model, x, q)
        points = activation_points(model)
        propagated = {}
        for name, idx in points.items():
            if idx < 0:
                if q.input_format is not None:
                    propagated[name] = _sqnr(x, q.input_format)
                continue
            ref = float_outs[idx]
            propagated[name] = quantized_sqnr(ref, fixed_outs[idx]) if np.any(ref) else math.inf
        network = {
            "top1_agreement": top1_agreement(model, q, x),
            "top5_agreement": topk_agreement(model, q, x, 5),
            "eval_set": eval_set_descriptor(x, eval_label),
        }
    records = []
    names = [INPUT_KEY] + [layer.name for layer in model.param_layers]
    for name in names:
        fmt = q.input_format if name == INPUT_KEY else q.entry(name).fm_format
        if name == INPUT_KEY and fmt is None:
            continue
        rec = {"layer": name, "scheme": q.scheme}
        if name != INPUT_KEY:
            e = q.entry(name)
            rec.update(
                weight_fl=e.weight_fl,
                weight_bw=e.weight_bw,
                bias_fl=e.bias_fl,
                bias_bw=e.bias_bw,
                weight_sqnr_db=wsq[name][0],
                bias_sqnr_db=wsq[name][1],
            )
        rec.update(
            fm_fl=None if fmt is None else fmt.fractional_length,
            fm_bw=None if fmt is None else fmt.bit_width,
            fm_signed=None if fmt is None else fmt.signed,
            fm_sqnr_db=fsq.get(name),
            fm_predicted_mse=dist.get(name, (None, None))[0],
            fm_empirical_mse=dist.get(name, (None, None))[1],
        )
        if network is not None:
            rec["fm_sqnr_network_db"] = propagated[name]
        records.append(rec)
    report = {"scheme": q.scheme, "layers": records}
    if promoted is not None:
        n_layers = len(model.param_layers)
        n_fm = len(fm_formats(q)) if q.input_format is not None else n_layers
        report["promotion"] = {
            "weights": list(promoted.promoted_weights),
            "weights_ratio_percent": 100.0 * len(promoted.promoted_weights) / n_layers,
            "fm": list(promoted.promoted_fm),
            "fm_ratio_percent": 100.0 * len(promoted.promoted_fm) / n_fm,
        }
    report["network"] = network
    report["notes"] = list(q.notes) + [
        "input tensor quantized with its own calibrated feature-map format",
        "fast-mode support uses N*step/2 with the symmetric level count (2 x one-sided levels)",
    ]
    return report


def run_full_pipeline(
    model: NetworkModel,
    calib_inputs,
    eval_inputs,
    bws: BitWidths,
    tune_weights: bool = True,
    tune_fm: bool = True,
    mode=Mode.DEFAULT,
    window: int = 1,
):
    """WQ -> (W-BFT) -> FQ -> (FM-BFT); returns ``(config, {stage: agreement})``."""
    from .bft import BftConfig, run_bft
    from .netsim import capture_calibration

    stats = capture_calibration(model, calib_inputs)
    acts = capture_activations(model, calib_inputs)
    stages = {}
    q = quantize_network(model, stats, acts, "wq", bws, mode).config
    stages["WQ"] = top1_agreement(model, q, eval_inputs)
    if tune_weights:
        q, _ = run_bft(model, q, eval_inputs, BftConfig(window=window, target="weights"))
        q = replace(q, scheme="WQ+")
        stages["WQ+"] = top1_agreement(model, q, eval_inputs)
    q = quantize_network(model, stats, acts, "wq-fq", bws, mode, weights_from=q).config
    stages[q.scheme] = top1_agreement(model, q, eval_inputs)
    if tune_fm:
        q, _ = run_bft(model, q, eval_inputs, BftConfig(window=window, target="feature_maps"))
        q = replace(q, scheme=tag_after_bft(q.scheme, "feature_maps"))
        stages[q.scheme] = top1_agreement(model, q, eval_inputs)
    return q, stages

"""On-disk formats: JSON documents plus raw little-endian float32 tensor blobs.

Every document carries ``format`` and ``version`` fields. Floats are written
rounded to 9 significant digits; non-finite values are written as the strings
``"inf"``, ``"-inf"`` and ``"nan"``. Field order is fixed, so emit -> parse ->
emit reproduces a file byte for byte.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import FormatError, ModelError
from .fixedpoint import FixedPointFormat
from .netsim import LayerQuant, LayerSpec, NetworkModel, QuantConfig
from .quantizers import GroupMoments, SampleStats

VERSION = 1
MODEL = "ggdquant-model"
DATASET = "ggdquant-dataset"
STATS = "ggdquant-stats"
CONFIG = "ggdquant-config"
REPORT = "ggdquant-report"
TRACE = "ggdquant-trace"

_NON_FINITE = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}
# string-valued fields that must never be decoded as numbers
_TEXT_KEYS = frozenset({"name", "layer", "label", "scheme", "path", "kind", "format", "reason", "field", "direction", "status"})


# -- generic JSON helpers -------------------------------------------------------------


def _encode(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return float(f"{v:.9g}")
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if value is None or isinstance(value, str):
        return value
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _decode(value, key=None):
    if isinstance(value, dict):
        return {k: _decode(v, k) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v, key) for v in value]
    if isinstance(value, str) and key not in _TEXT_KEYS and value in _NON_FINITE:
        return _NON_FINITE[value]
    return value


def dumps(doc: dict) -> str:
    return json.dumps(_encode(doc), indent=2, allow_nan=False) + "\n"


def loads(text: str, source: str = "<string>", kind: str | None = None) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "format" not in doc or "version" not in doc:
        raise FormatError(f"{source}:1: missing 'format'/'version' header")
    if kind is not None and doc["format"] != kind:
        raise FormatError(f"{source}:1: expected a {kind!r} document, found {doc['format']!r}")
    if doc["version"] != VERSION:
        raise FormatError(f"{source}:1: unsupported version {doc['version']!r}")
    return _decode(doc)


def read_doc(path, kind: str | None = None) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from None
    return loads(text, str(path), kind)


def write_doc(path, doc: dict) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(doc), encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror or exc}") from None


def _header(kind: str) -> dict:
    return {"format": kind, "version": VERSION}


def _field(doc: dict, key: str, source: str):
    try:
        return doc[key]
    except (KeyError, TypeError):
        raise FormatError(f"{source}: missing field {key!r}") from None


# -- tensor blobs ---------------------------------------------------------------


def write_blob(path, array) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_blob(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing tensor blob: {path}")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape)) if len(shape) else 1
    if data.size != expected:
        raise FormatError(f"tensor blob {path} holds {data.size} values, shape {list(shape)} needs {expected}")
    return data.astype(np.float64).reshape(shape)


# -- model manifest ----------------------------------------------------------------------


def model_to_doc(model: NetworkModel, tensor_dir: str = "tensors") -> dict:
    layers = []
    for layer in model.layers:
        rec = {"name": layer.name, "kind": layer.kind}
        if layer.kind in ("conv", "maxpool", "avgpool"):
            rec["stride"] = layer.stride
        if layer.kind == "conv":
            rec["padding"] = layer.padding
        if layer.kind in ("maxpool", "avgpool"):
            rec["kernel"] = layer.kernel
        if layer.weight is not None:
            for part in ("weight", "bias"):
                arr = getattr(layer, part)
                rec[part] = {"path": f"{tensor_dir}/{layer.name}.{part}.f32", "shape": list(arr.shape)}
        layers.append(rec)
    return {**_header(MODEL), "input_shape": list(model.input_shape), "layers": layers}


def write_model(model: NetworkModel, manifest_path, tensor_dir: str = "tensors") -> None:
    manifest_path = Path(manifest_path)
    doc = model_to_doc(model, tensor_dir)
    for layer in model.param_layers:
        for part in ("weight", "bias"):
            write_blob(manifest_path.parent / f"{tensor_dir}/{layer.name}.{part}.f32", getattr(layer, part))
    write_doc(manifest_path, doc)


def model_from_doc(doc: dict, base_dir, source: str = "<model>") -> NetworkModel:
    base_dir = Path(base_dir)
    layers = []
    for rec in _field(doc, "layers", source):
        name = _field(rec, "name", source)
        kwargs = {k: int(rec[k]) for k in ("stride", "padding", "kernel") if k in rec}
        arrays = {}
        for part in ("weight", "bias"):
            if part in rec:
                ref = rec[part]
                arrays[part] = read_blob(base_dir / _field(ref, "path", source), tuple(_field(ref, "shape", source)))
        layers.append(LayerSpec(name, _field(rec, "kind", source), arrays.get("weight"), arrays.get("bias"), **kwargs))
    try:
        return NetworkModel(tuple(_field(doc, "input_shape", source)), layers)
    except ModelError as exc:
        raise ModelError(f"{source}: {exc}") from None


def read_model(path) -> NetworkModel:
    path = Path(path)
    return model_from_doc(read_doc(path, MODEL), path.parent, str(path))


# -- datasets ---------------------------------------------------------------------------------


def write_dataset(inputs, manifest_path, blob_name: str | None = None, label: str = "") -> None:
    manifest_path = Path(manifest_path)
    x = np.asarray(inputs)
    blob_name = blob_name or manifest_path.stem + ".f32"
    write_blob(manifest_path.parent / blob_name, x)
    write_doc(manifest_path, {**_header(DATASET), "label": label, "shape": list(x.shape), "path": blob_name})


def read_dataset(path) -> tuple:
    """Returns ``(inputs, label)``."""
    path = Path(path)
    doc = read_doc(path, DATASET)
    shape = tuple(_field(doc, "shape", str(path)))
    return read_blob(path.parent / _field(doc, "path", str(path)), shape), doc.get("label", "")


# -- statistics ----------------------------------------------------------------------------------


def _moments_doc(g: GroupMoments) -> dict:
    return {"count": g.count, "mean": g.mean, "var": g.var}


def stats_to_doc(stats: dict, degenerate: dict | None = None, order=None) -> dict:
    """``stats``: name -> SampleStats; ``degenerate``: name -> reason (flagged, not fatal)."""
    degenerate = degenerate or {}
    names = list(order) if order is not None else list(stats) + [n for n in degenerate if n not in stats]
    layers = []
    for name in names:
        if name in degenerate:
            layers.append({"name": name, "status": "degenerate", "reason": degenerate[name]})
            continue
        s = stats[name]
        layers.append(
            {
                "name": name,
                "status": "ok",
                "count_total": s.count_total,
                "count_zero": s.count_zero,
                "count_negative": s.count_negative,
                "rho": s.rho,
                "mean_excl_zero": s.mean_excl_zero,
                "var_excl_zero": s.var_excl_zero,
                "max_value": s.max_value,
                "min_value": s.min_value,
                "positive": _moments_doc(s.pos),
                "negative": _moments_doc(s.neg),
            }
        )
    return {**_header(STATS), "layers": layers}


def stats_from_doc(doc: dict, source: str = "<stats>") -> tuple:
    """Returns ``(stats, degenerate)`` dictionaries."""
    stats, degenerate = {}, {}
    for rec in _field(doc, "layers", source):
        name = _field(rec, "name", source)
        if rec.get("status") == "degenerate":
            degenerate[name] = rec.get("reason", "")
            continue
        try:
            stats[name] = SampleStats(
                mean_excl_zero=float(rec["mean_excl_zero"]),
                var_excl_zero=float(rec["var_excl_zero"]),
                count_total=int(rec["count_total"]),
                count_zero=int(rec["count_zero"]),
                count_negative=int(rec["count_negative"]),
                rho=float(rec["rho"]),
                pos=GroupMoments(**rec["positive"]),
                neg=GroupMoments(**rec["negative"]),
                max_value=float(rec["max_value"]),
                min_value=float(rec["min_value"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{source}: bad stats record for {name!r}: {exc}") from None
    return stats, degenerate


# -- quantization configs ----------------------------------------------------------------------


def _format_doc(fmt: FixedPointFormat | None):
    if fmt is None:
        return None
    return {"bit_width": fmt.bit_width, "fractional_length": fmt.fractional_length, "signed": fmt.signed}


def config_to_doc(q: QuantConfig) -> dict:
    layers = []
    for name, e in q.layers.items():
        layers.append(
            {
                "name": name,
                "weight_fl": e.weight_fl,
                "weight_bw": e.weight_bw,
                "bias_fl": e.bias_fl,
                "bias_bw": e.bias_bw,
                "fm_fl": e.fm_fl,
                "fm_bw": e.fm_bw,
                "fm_signed": e.fm_signed,
            }
        )
    return {
        **_header(CONFIG),
        "scheme": q.scheme,
        "input": _format_doc(q.input_format),
        "layers": layers,
        "notes": list(q.notes),
    }


def config_from_doc(doc: dict, source: str = "<config>") -> QuantConfig:
    layers = {}
    try:
        for rec in _field(doc, "layers", source):
            fields = {k: rec[k] for k in ("weight_fl", "weight_bw", "bias_fl", "bias_bw", "fm_fl", "fm_bw", "fm_signed")}
            layers[rec["name"]] = LayerQuant(**fields)
        inp = doc.get("input")
        input_format = None
        if inp is not None:
            input_format = FixedPointFormat(inp["bit_width"], inp["fractional_length"], inp["signed"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{source}: bad config record: {exc}") from None
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None
    return QuantConfig(layers, input_format, scheme=_field(doc, "scheme", source), notes=tuple(doc.get("notes", ())))


def read_config(path) -> QuantConfig:
    return config_from_doc(read_doc(path, CONFIG), str(path))


# -- BFT traces and reports ---------------------------------------------------------------------


def trace_to_doc(trace) -> dict:
    steps = [
        {
            "layer": s.layer,
            "field": s.field,
            "direction": s.direction,
            "incumbent": s.incumbent,
            "candidates": [[fl, score] for fl, score in s.candidates],
            "chosen": s.chosen,
            "changed": s.changed,
            "clamped": list(s.clamped),
        }
        for s in trace.steps
    ]
    return {
        **_header(TRACE),
        "initial_score": trace.initial_score,
        "final_score": trace.final_score,
        "changes_backward": len(trace.changes("backward")),
        "changes_forward": len(trace.changes("forward")),
        "steps": steps,
    }


def report_to_doc(report: dict) -> dict:
    return {**_header(REPORT), **report}

"""Backward-forward tuning of per-layer fractional lengths.

Each step moves one layer's FL within ``[FL - window, FL + window]`` to the
value that maximizes a weighted sum of network metrics, commits it, and moves
on. Layers are visited from the output back to the input, then forward again.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import QuantDomainError
from .fixedpoint import FixedPointFormat
from .netsim import (
    NetworkModel,
    QuantConfig,
    capture_activations,
    float_top1,
    top1_agreement,
    topk_agreement,
)


class Target(str, enum.Enum):
    WEIGHTS = "weights"
    FEATURE_MAPS = "feature_maps"
    BOTH = "both"


def top5_agreement(model, q, inputs, reference):
    return topk_agreement(model, q, inputs, 5, reference)


DEFAULT_METRICS = (top1_agreement, top5_agreement)


class BftError(QuantDomainError):
    """Evaluation failed for a particular layer and FL candidate."""


@dataclass(frozen=True)
class BftConfig:
    order: tuple | None = None
    window: int = 1
    metric_weights: tuple = (1.0, 0.0)
    target: Target = Target.FEATURE_MAPS
    metrics: tuple = DEFAULT_METRICS

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        object.__setattr__(self, "target", Target(self.target))
        weights = tuple(float(c) for c in self.metric_weights)
        if len(weights) != len(self.metrics):
            raise ValueError("need one metric weight per metric")
        if any(c < 0 for c in weights) or not any(c > 0 for c in weights):
            raise ValueError("metric weights must be non-negative and not all zero")
        object.__setattr__(self, "metric_weights", weights)


@dataclass
class BftStep:
    layer: str
    field: str
    direction: str
    incumbent: int
    candidates: list
    chosen: int
    clamped: list = field(default_factory=list)

    @property
    def changed(self) -> bool:
        return self.chosen != self.incumbent


@dataclass
class BftTrace:
    steps: list = field(default_factory=list)
    initial_score: float = 0.0
    final_score: float = 0.0

    def changes(self, direction=None) -> list:
        return [
            s for s in self.steps if s.changed and (direction is None or s.direction == direction)
        ]


def default_order(model: NetworkModel) -> list:
    names = [layer.name for layer in model.param_layers]
    return [(n, "backward") for n in reversed(names)] + [(n, "forward") for n in names]


def _config_key(q: QuantConfig):
    return tuple(sorted((n, e) for n, e in q.layers.items())), q.input_format


def _pick(candidates, incumbent):
    """Highest score; ties go to the FL nearest the incumbent, then the larger FL."""
    best = max(score for _, score in candidates)
    tied = [fl for fl, score in candidates if score == best]
    return min(tied, key=lambda fl: (abs(fl - incumbent), -fl))


def _fl_cap(fmt: FixedPointFormat, observed_max: float) -> int | None:
    """Largest FL whose range still reaches ``observed_max``."""
    if not observed_max > 0:
        return None
    fl = fmt.fractional_length
    # the range halves for every FL increment; walk from a covering FL
    while fmt.with_fl(fl).max_value < observed_max:
        fl -= 1
    while fmt.with_fl(fl + 1).max_value >= observed_max:
        fl += 1
    return fl


def run_bft(model: NetworkModel, q: QuantConfig, eval_inputs, cfg: BftConfig | None = None):
    """Tune fractional lengths by coordinate ascent; returns ``(config, trace)``."""
    cfg = cfg or BftConfig()
    q.check(model)
    x = np.asarray(eval_inputs, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("BFT needs a non-empty batch of evaluation inputs")
    reference = float_top1(model, x)
    activations = None

    fields = {
        Target.WEIGHTS: ("weight",),
        Target.FEATURE_MAPS: ("fm",),
        Target.BOTH: ("weight", "fm"),
    }[cfg.target]
    if cfg.order is None:
        order = default_order(model)
    else:
        order = [(n, "custom") if isinstance(n, str) else tuple(n) for n in cfg.order]

    cache = {}

    def score(config, layer, fl):
        key = _config_key(config)
        if key not in cache:
            try:
                total = 0.0
                for c, metric in zip(cfg.metric_weights, cfg.metrics):
                    if c:
                        total += c * metric(model, config, x, reference)
            except Exception as exc:
                raise BftError(f"evaluation failed for layer {layer!r} at FL={fl}: {exc}") from exc
            cache[key] = total
        return cache[key]

    trace = BftTrace()
    trace.initial_score = score(q, None, None)
    for name, direction in order:
        for fld in fields:
            entry = q.entry(name)
            if fld == "weight":
                fmt = entry.weight_format
                observed = float(np.max(np.abs(model.layer(name).weight)))
            else:
                fmt = entry.fm_format
                if fmt is None:
                    continue
                if activations is None:
                    activations = capture_activations(model, x)
                observed = float(np.max(np.abs(activations[name])))
            incumbent = fmt.fractional_length
            window = range(incumbent - cfg.window, incumbent + cfg.window + 1)
            cap = _fl_cap(fmt, observed)
            clamped = []
            if cap is not None:
                cap = max(cap, incumbent)
                clamped = [fl for fl in window if fl > cap]
            candidates = []
            for fl in window:
                if fl in clamped:
                    continue
                trial = q.with_layer(name, **{f"{fld}_fl": fl})
                candidates.append((fl, score(trial, name, fl)))
            chosen = _pick(candidates, incumbent)
            q = q.with_layer(name, **{f"{fld}_fl": chosen})
            trace.steps.append(BftStep(name, fld, direction, incumbent, candidates, chosen, clamped))
    trace.final_score = score(q, None, None)
    return q, trace

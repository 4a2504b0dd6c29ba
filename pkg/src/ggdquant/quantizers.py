"""Per-layer fractional-length selection for weights, biases and feature maps.

Weights and biases: candidates start at the largest FL that still covers the
maximum magnitude and the one with the least total squared error wins.

Feature maps: a gamma density is fitted to the non-zero activations, the
asymptotically optimal uniform step is computed in closed form, and the two
powers of two around it (one per side of a double-sided layer) are scored
either on the samples (``default`` mode) or by the predicted distortion
(``fast`` mode).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import ggd
from .errors import DegenerateStatsError, InvalidSampleError
from .fixedpoint import FixedPointFormat, ceil_log2, floor_log2, quantize_tensor


class Mode(str, enum.Enum):
    DEFAULT = "default"
    FAST = "fast"


class TensorKind(str, enum.Enum):
    WEIGHT = "weight"
    FEATURE_MAP = "feature_map"


@dataclass(frozen=True)
class FlSearchConfig:
    bit_width: int
    k_w: int = 2
    mode: Mode = Mode.DEFAULT

    def __post_init__(self):
        if self.k_w < 1:
            raise ValueError(f"k_w must be >= 1, got {self.k_w}")
        object.__setattr__(self, "mode", Mode(self.mode))
        # validates the bit width
        FixedPointFormat(self.bit_width, 0)


@dataclass(frozen=True)
class LayerQuantResult:
    fractional_length: int
    distortion: float
    candidates_evaluated: tuple
    # closed-form quantities behind a feature-map decision, for reports
    details: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class GroupMoments:
    """Count, mean and population variance of one group of magnitudes."""

    count: int
    mean: float
    var: float


@dataclass(frozen=True)
class SampleStats:
    mean_excl_zero: float
    var_excl_zero: float
    count_total: int
    count_zero: int
    count_negative: int
    rho: float
    pos: GroupMoments
    neg: GroupMoments
    max_value: float
    min_value: float

    @property
    def max_abs(self) -> float:
        return max(abs(self.max_value), abs(self.min_value))

    @property
    def single_sided(self) -> bool:
        return self.count_negative == 0


class _Running:
    # Chan et al. pairwise update of (n, mean, M2); deterministic for a fixed batch order.
    __slots__ = ("m2", "mean", "n")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, values: np.ndarray) -> None:
        nb = values.size
        if nb == 0:
            return
        mb = float(values.mean())
        m2b = float(np.sum((values - mb) ** 2))
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n

    def moments(self) -> GroupMoments:
        if self.n == 0:
            return GroupMoments(0, 0.0, 0.0)
        return GroupMoments(self.n, self.mean, self.m2 / self.n)


class StatsAccumulator:
    """Streams batches of activations into :class:`SampleStats`."""

    def __init__(self):
        self.total = 0
        self.zero = 0
        self.nonzero = _Running()
        self.pos = _Running()
        self.neg = _Running()
        self.max_value = -math.inf
        self.min_value = math.inf

    def update(self, samples) -> None:
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size == 0:
            return
        if not np.all(np.isfinite(x)):
            raise InvalidSampleError("samples contain non-finite values")
        self.total += x.size
        nz = x[x != 0]
        self.zero += x.size - nz.size
        self.nonzero.add(nz)
        self.pos.add(nz[nz > 0])
        self.neg.add(-nz[nz < 0])
        self.max_value = max(self.max_value, float(x.max()))
        self.min_value = min(self.min_value, float(x.min()))

    def finalize(self, layer=None) -> SampleStats:
        if self.total == 0:
            raise InvalidSampleError("no samples collected")
        if self.zero == self.total:
            raise DegenerateStatsError("all samples are zero", layer=layer)
        nz = self.nonzero.moments()
        neg = self.neg.moments()
        return SampleStats(
            mean_excl_zero=nz.mean,
            var_excl_zero=nz.var,
            count_total=self.total,
            count_zero=self.zero,
            count_negative=neg.count,
            rho=neg.count / self.total,
            pos=self.pos.moments(),
            neg=neg,
            max_value=self.max_value,
            min_value=self.min_value,
        )


def collect_stats(samples) -> SampleStats:
    """Zero-excluded moments, counts and the negative fraction of a sample set."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise InvalidSampleError("cannot collect statistics from an empty sample set")
    acc = StatsAccumulator()
    acc.update(x)
    return acc.finalize()


def _argmin_first(scored):
    best_fl, best_d = scored[0]
    for fl, d in scored[1:]:
        if d < best_d:
            best_fl, best_d = fl, d
    return best_fl, best_d


# -- weights and biases --------------------------------------------------------


def weight_fl_candidates(weights, cfg: FlSearchConfig) -> list:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise InvalidSampleError("weight tensor is empty")
    max_abs = float(np.max(np.abs(w)))
    if max_abs == 0:
        raise DegenerateStatsError("weight tensor is all zero; no FL range can be derived")
    m = cfg.bit_width - 1 - ceil_log2(max_abs)
    return list(range(m, m + cfg.k_w))


def quantize_weights_layer(weights, cfg: FlSearchConfig) -> LayerQuantResult:
    """Pick the weight (or bias) FL with the least total squared error."""
    w = np.asarray(weights, dtype=np.float64)
    scored = []
    for fl in weight_fl_candidates(w, cfg):
        _, err = quantize_tensor(w, FixedPointFormat(cfg.bit_width, fl, signed=True))
        scored.append((fl, err.sum_squared_error))
    fl, d = _argmin_first(scored)
    return LayerQuantResult(fl, d, tuple(scored))


# -- feature maps ---------------------------------------------------------------


def _step_candidates(step: float) -> list:
    lo, hi = -ceil_log2(step), -floor_log2(step)
    return [lo] if lo == hi else [lo, hi]


def _group_params(moments: GroupMoments, side: str) -> ggd.GgdParams:
    if moments.count < 2 or not moments.var > 0:
        raise DegenerateStatsError(
            f"{side} group needs at least two distinct non-zero values "
            f"(count={moments.count}, variance={moments.var:.6g})"
        )
    return ggd.estimate_from_moments(moments.mean, moments.var)


def quantize_fm_single_sided(samples, stats: SampleStats, cfg: FlSearchConfig) -> LayerQuantResult:
    """FL for non-negative activations (e.g. after ReLU).

    ``samples`` may be ``None`` in fast mode, where only ``stats`` is used.
    The one-sided quantizer has ``2**bit_width`` levels (unsigned format).
    """
    if stats.count_negative:
        raise InvalidSampleError("single-sided quantization needs non-negative samples")
    params = _group_params(stats.pos, "positive")
    levels = 1 << cfg.bit_width
    design = ggd.design_single_sided(levels, params)
    candidates = _step_candidates(design.step_size)

    scored = []
    if cfg.mode is Mode.DEFAULT:
        if samples is None:
            raise ValueError("default mode scores on samples; none were given")
        x = np.asarray(samples, dtype=np.float64)
        if np.any(x < 0):
            raise InvalidSampleError("single-sided quantization needs non-negative samples")
        for fl in candidates:
            _, err = quantize_tensor(x, FixedPointFormat(cfg.bit_width, fl, signed=False))
            scored.append((fl, err.sum_squared_error))
    else:
        n_sym = design.levels_n
        for fl in candidates:
            step = math.ldexp(1.0, -fl)
            scored.append((fl, ggd.predicted_distortion(n_sym, n_sym * step / 2.0, params)))
    fl, d = _argmin_first(scored)
    details = {
        "levels_symmetric": design.levels_n,
        "support_length": design.support_length,
        "step_size": design.step_size,
        "predicted_distortion": design.predicted_distortion,
        "params": {"pos": params},
    }
    return LayerQuantResult(fl, d, tuple(scored), details)


def quantize_fm_double_sided(samples, stats: SampleStats, cfg: FlSearchConfig) -> LayerQuantResult:
    """FL for activations of both signs, quantized with a signed format.

    Negative samples are fitted on their magnitudes; zeros are excluded from
    both fits but counted in the negative fraction ``rho``.
    """
    if stats.count_negative == 0 or stats.pos.count == 0:
        raise InvalidSampleError("double-sided quantization needs negative and positive samples")
    levels = 1 << cfg.bit_width
    params = {}
    designs = {}
    collected = []
    for side, moments in (("neg", stats.neg), ("pos", stats.pos)):
        p = _group_params(moments, "negative" if side == "neg" else "positive")
        # one side of the signed grid has levels/2 cells
        d = ggd.design_single_sided(levels // 2, p)
        params[side], designs[side] = p, d
        collected.extend(_step_candidates(d.step_size))
    candidates = list(range(min(collected), max(collected) + 1))

    scored = []
    if cfg.mode is Mode.DEFAULT:
        if samples is None:
            raise ValueError("default mode scores on samples; none were given")
        x = np.asarray(samples, dtype=np.float64)
        for fl in candidates:
            _, err = quantize_tensor(x, FixedPointFormat(cfg.bit_width, fl, signed=True))
            scored.append((fl, err.sum_squared_error))
    else:
        rho = stats.rho
        for fl in candidates:
            step = math.ldexp(1.0, -fl)
            support = levels * step / 2.0
            d_neg = ggd.predicted_distortion(levels, support, params["neg"])
            d_pos = ggd.predicted_distortion(levels, support, params["pos"])
            scored.append((fl, rho * d_neg + (1.0 - rho) * d_pos))
    fl, d = _argmin_first(scored)
    details = {
        "levels_symmetric": levels,
        "rho": stats.rho,
        "step_size": {k: v.step_size for k, v in designs.items()},
        "support_length": {k: v.support_length for k, v in designs.items()},
        "predicted_distortion": stats.rho * designs["neg"].predicted_distortion
        + (1.0 - stats.rho) * designs["pos"].predicted_distortion,
        "params": params,
    }
    return LayerQuantResult(fl, d, tuple(scored), details)


def quantize_fm(samples, stats: SampleStats, cfg: FlSearchConfig) -> LayerQuantResult:
    if stats.single_sided:
        return quantize_fm_single_sided(samples, stats, cfg)
    return quantize_fm_double_sided(samples, stats, cfg)


# -- baseline -------------------------------------------------------------------


def ristretto_fl(max_abs: float, bit_width: int, kind, signed: bool | None = None) -> int:
    """Max-based baseline FL.

    Weights: ``bw - 1 - ceil(log2 max|W|)``. Feature maps: ``bw - ceil(log2 max x)``
    for unsigned maps; a signed (double-sided) map spends one bit on the sign,
    so it gets the weight rule.
    """
    kind = TensorKind(kind)
    if not max_abs > 0 or not math.isfinite(max_abs):
        raise DegenerateStatsError(f"baseline FL needs a positive maximum, got {max_abs!r}")
    if signed is None:
        signed = kind is TensorKind.WEIGHT
    sign_bit = 1 if signed else 0
    return bit_width - sign_bit - ceil_log2(max_abs)

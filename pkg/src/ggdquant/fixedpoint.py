"""Fixed-point grids, the rounding/saturating quantizer and SQNR bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSampleError

MIN_BIT_WIDTH = 2
MAX_BIT_WIDTH = 32


@dataclass(frozen=True)
class FixedPointFormat:
    """A binary fixed-point format.

    The representable values are ``k * 2**-fractional_length`` for integer
    ``k`` in ``[-2**(bw-1), 2**(bw-1) - 1]`` (signed) or ``[0, 2**bw - 1]``
    (unsigned). ``fractional_length`` may be negative or exceed the bit width.
    """

    bit_width: int
    fractional_length: int
    signed: bool = True

    def __post_init__(self):
        if not isinstance(self.bit_width, (int, np.integer)) or isinstance(self.bit_width, bool):
            raise TypeError("bit_width must be an integer")
        if not isinstance(self.fractional_length, (int, np.integer)) or isinstance(
            self.fractional_length, bool
        ):
            raise TypeError("fractional_length must be an integer")
        if not MIN_BIT_WIDTH <= self.bit_width <= MAX_BIT_WIDTH:
            raise ValueError(
                f"bit_width must be in [{MIN_BIT_WIDTH}, {MAX_BIT_WIDTH}], got {self.bit_width}"
            )
        object.__setattr__(self, "bit_width", int(self.bit_width))
        object.__setattr__(self, "fractional_length", int(self.fractional_length))

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.fractional_length)

    @property
    def int_min(self) -> int:
        return -(1 << (self.bit_width - 1)) if self.signed else 0

    @property
    def int_max(self) -> int:
        return (1 << (self.bit_width - 1)) - 1 if self.signed else (1 << self.bit_width) - 1

    @property
    def min_value(self) -> float:
        return math.ldexp(float(self.int_min), -self.fractional_length)

    @property
    def max_value(self) -> float:
        return math.ldexp(float(self.int_max), -self.fractional_length)

    def with_fl(self, fractional_length: int) -> FixedPointFormat:
        return FixedPointFormat(self.bit_width, fractional_length, self.signed)


@dataclass(frozen=True)
class QuantizationError:
    """Accumulated squared error and signal power of a quantized tensor."""

    sum_squared_error: float
    sum_signal_power: float
    sample_count: int

    def __post_init__(self):
        if self.sum_squared_error < 0 or self.sum_signal_power < 0 or self.sample_count < 0:
            raise ValueError("QuantizationError fields must be non-negative")

    @property
    def mse(self) -> float:
        return self.sum_squared_error / self.sample_count

    @property
    def sqnr_db(self) -> float:
        return sqnr_db(self)

    def __add__(self, other: QuantizationError) -> QuantizationError:
        return QuantizationError(
            self.sum_squared_error + other.sum_squared_error,
            self.sum_signal_power + other.sum_signal_power,
            self.sample_count + other.sample_count,
        )


def _round_half_away(v):
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def quantize_array(xs, fmt: FixedPointFormat) -> np.ndarray:
    """Quantize every element of ``xs`` to ``fmt``; returns float64 values.

    Rounding is to nearest with ties away from zero, followed by saturation.
    No validation is done here; use :func:`quantize_tensor` for checked input.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ints = _round_half_away(np.ldexp(xs, fmt.fractional_length))
    # adding 0.0 turns the -0.0 left by copysign into +0.0
    ints = np.clip(ints, fmt.int_min, fmt.int_max) + 0.0
    return np.ldexp(ints, -fmt.fractional_length)


def quantize(x: float, fmt: FixedPointFormat) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise InvalidSampleError(f"cannot quantize non-finite value {x!r}")
    return float(quantize_array(x, fmt))


def quantize_tensor(xs, fmt: FixedPointFormat):
    """Quantize a sequence and measure the error it introduces.

    Returns ``(quantized, QuantizationError)``; the quantized values are a
    float64 array with the input's shape.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise InvalidSampleError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(xs)):
        raise InvalidSampleError("tensor contains non-finite values")
    q = quantize_array(xs, fmt)
    diff = xs - q
    err = QuantizationError(
        sum_squared_error=float(np.dot(diff.ravel(), diff.ravel())),
        sum_signal_power=float(np.dot(xs.ravel(), xs.ravel())),
        sample_count=int(xs.size),
    )
    return q, err


def sqnr_db(err: QuantizationError) -> float:
    """Signal-to-quantization-noise ratio in dB; ``math.inf`` when noise is zero."""
    if err.sample_count <= 0:
        raise InvalidSampleError("SQNR needs at least one sample")
    if err.sum_signal_power == 0:
        raise InvalidSampleError("SQNR is undefined for a zero-power signal")
    if err.sum_squared_error == 0:
        return math.inf
    return 10.0 * math.log10(err.sum_signal_power / err.sum_squared_error)


def on_grid(xs, fmt: FixedPointFormat) -> bool:
    """True when every element is representable in ``fmt``."""
    ints = np.ldexp(np.asarray(xs, dtype=np.float64), fmt.fractional_length)
    return bool(
        np.all(ints == np.round(ints)) and np.all(ints >= fmt.int_min) and np.all(ints <= fmt.int_max)
    )


def ceil_log2(value: float) -> int:
    """Exact ``ceil(log2(value))`` for positive finite floats."""
    if value <= 0 or not math.isfinite(value):
        raise ValueError(f"log2 needs a positive finite value, got {value!r}")
    mant, exp = math.frexp(value)
    return exp - 1 if mant == 0.5 else exp


def floor_log2(value: float) -> int:
    """Exact ``floor(log2(value))`` for positive finite floats."""
    if value <= 0 or not math.isfinite(value):
        raise ValueError(f"log2 needs a positive finite value, got {value!r}")
    return math.frexp(value)[1] - 1

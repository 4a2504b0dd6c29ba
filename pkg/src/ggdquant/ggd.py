"""Generalized gamma densities and asymptotically optimal uniform quantizers.

The density family is ``mu * |x|**beta * exp(-lam * |x|**alpha)``. With
``alpha == 1`` it is a symmetrized gamma density, which is what
:func:`estimate_from_moments` produces from one-sided sample moments.

Level-count convention: ``n`` always denotes the level count of a *symmetric*
quantizer. The one-sided quantizer with ``m`` levels on ``[0, m * step]`` has
the same step as the symmetric ``2m``-level design for the mirrored density,
and :func:`design_single_sided` is the only place where that doubling happens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import AsymptoticDomainError, DegenerateStatsError, InvalidSampleError

MIN_SYMMETRIC_LEVELS = 4
# Gamma(kappa) overflows a double just above 171; past this point the
# moments are treated as degenerate rather than fitted.
MAX_SHAPE = 170.0


@dataclass(frozen=True)
class GgdParams:
    alpha: float
    beta: float
    lam: float
    mu: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (self.beta > -1 and math.isfinite(self.beta)):
            raise ValueError(f"beta must exceed -1, got {self.beta}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValueError(f"mu must be positive and finite, got {self.mu}")

    @property
    def kappa(self) -> float:
        """Gamma shape parameter, ``(beta + 1) / alpha``."""
        return (self.beta + 1.0) / self.alpha

    @property
    def theta(self) -> float:
        """Gamma scale parameter ``lam**(-1/alpha)``; a true gamma scale only when alpha is 1."""
        return self.lam ** (-1.0 / self.alpha)

    def pdf(self, x):
        """Symmetric density evaluated at ``x``."""
        ax = np.abs(np.asarray(x, dtype=np.float64))
        with np.errstate(divide="ignore"):
            return self.mu * ax**self.beta * np.exp(-self.lam * ax**self.alpha)


@dataclass(frozen=True)
class QuantizerDesign:
    levels_n: int
    support_length: float
    step_size: float
    predicted_distortion: float


def estimate_from_moments(mean: float, variance: float) -> GgdParams:
    """Fit the symmetrized gamma density (alpha fixed to 1) to one-sided moments.

    ``mean`` and ``variance`` must come from the non-zero magnitudes of a
    layer's samples. The gamma fit has shape ``mean**2 / variance`` and rate
    ``mean / variance``; ``mu`` carries an extra factor 1/2 because the density
    is mirrored onto the negative axis.
    """
    mean = float(mean)
    variance = float(variance)
    if not (math.isfinite(mean) and math.isfinite(variance)):
        raise DegenerateStatsError("moments must be finite")
    if mean <= 0 or variance <= 0:
        raise DegenerateStatsError(
            f"moments must be positive (mean={mean!r}, variance={variance!r})"
        )
    shape = mean * mean / variance
    if not shape > 0:
        raise DegenerateStatsError(f"shape mean^2/variance must be positive, got {shape!r}")
    if shape > MAX_SHAPE:
        raise DegenerateStatsError(
            f"shape mean^2/variance = {shape:.6g} exceeds {MAX_SHAPE:g}; Gamma overflows"
        )
    rate = mean / variance
    log_mu = shape * math.log(rate) - float(gammaln(shape)) - math.log(2.0)
    if log_mu > 700:
        raise DegenerateStatsError(f"normalization constant overflows (log mu = {log_mu:.6g})")
    return GgdParams(alpha=1.0, beta=shape - 1.0, lam=rate, mu=math.exp(log_mu))


def _log_phi(p: GgdParams) -> float:
    r = (1.0 + p.beta) / p.alpha
    return (
        (1.0 - r) * math.log(2.0)
        + 2.0 * math.log(p.alpha)
        + r * math.log(p.lam)
        - math.log(3.0)
        - math.log(p.mu)
    )


def _check_levels(n: int) -> None:
    if int(n) != n or n < MIN_SYMMETRIC_LEVELS:
        raise AsymptoticDomainError(
            f"closed-form design needs at least {MIN_SYMMETRIC_LEVELS} symmetric levels, got {n}"
        )


def epsilon_correction(n: int, p: GgdParams) -> float:
    """Correction term added inside the support-length bracket."""
    _check_levels(n)
    r = (1.0 + p.beta) / p.alpha
    ln_n = math.log(n)
    lnln_n = math.log(ln_n)

    factors = {
        "(1 + 2*alpha*ln N / N)": 1.0 + 2.0 * p.alpha * ln_n / n,
        "(1 + (3 - 3*alpha + 2*beta) / (2*alpha*ln N))": 1.0
        + (3.0 - 3.0 * p.alpha + 2.0 * p.beta) / (2.0 * p.alpha * ln_n),
    }
    base = 1.0 + ((2.0 - r) * lnln_n + _log_phi(p)) / (2.0 * ln_n)
    if base <= 0:
        raise AsymptoticDomainError(
            f"correction term undefined at N={n}: base of the power factor is {base:.6g} <= 0"
        )
    log_product = (2.0 - r) * math.log(base)
    for name, value in factors.items():
        if value <= 0:
            raise AsymptoticDomainError(
                f"correction term undefined at N={n}: factor {name} = {value:.6g} <= 0"
            )
        log_product += math.log(value)
    return log_product / p.lam


def support_length(n: int, p: GgdParams) -> float:
    """Asymptotic MSE-optimal support half-width of the ``n``-level symmetric quantizer."""
    _check_levels(n)
    r = (1.0 + p.beta) / p.alpha
    ln_n = math.log(n)
    bracket = (
        2.0 * ln_n / p.lam
        - (2.0 - r) * math.log(ln_n) / p.lam
        - _log_phi(p) / p.lam
        + epsilon_correction(n, p)
    )
    if bracket <= 0:
        raise AsymptoticDomainError(
            f"support-length bracket is {bracket:.6g} <= 0; N={n} is too small for the asymptotic form"
        )
    return bracket ** (1.0 / p.alpha)


def predicted_distortion(n: int, support: float, p: GgdParams) -> float:
    """Granular plus overload MSE of an ``n``-level symmetric quantizer with support ``support``."""
    if n < 2:
        raise AsymptoticDomainError(f"need at least 2 levels, got {n}")
    if not support > 0:
        raise AsymptoticDomainError(f"support length must be positive, got {support!r}")
    granular = (2.0 * support / n) ** 2 / 12.0
    log_overload = (
        math.log(4.0)
        + math.log(p.mu)
        - 3.0 * math.log(p.alpha * p.lam)
        - p.lam * support**p.alpha
        - (3.0 * p.alpha - p.beta - 3.0) * math.log(support)
    )
    return granular + math.exp(log_overload)


def design_symmetric(n: int, p: GgdParams) -> QuantizerDesign:
    support = support_length(n, p)
    return QuantizerDesign(
        levels_n=int(n),
        support_length=support,
        step_size=2.0 * support / n,
        predicted_distortion=predicted_distortion(n, support, p),
    )


def design_single_sided(levels_single_sided: int, p: GgdParams) -> QuantizerDesign:
    """Design for a one-sided density using the symmetric design with twice the levels.

    The returned design keeps the symmetric level count in ``levels_n``; the
    one-sided quantizer covers ``[0, levels_single_sided * step_size]``.
    """
    if levels_single_sided < 2:
        raise AsymptoticDomainError(
            f"single-sided design needs at least 2 levels, got {levels_single_sided}"
        )
    return design_symmetric(2 * int(levels_single_sided), p)


# -- empirical quantizer and brute-force oracle -------------------------------


def uniform_quantize(samples, step: float, levels: int) -> np.ndarray:
    """Map non-negative samples through the one-sided midrise uniform quantizer.

    Cell ``k`` is ``[k*step, (k+1)*step)`` with reconstruction ``(k + 1/2)*step``;
    everything at or above ``(levels-1)*step`` goes to the top cell.
    """
    x = np.asarray(samples, dtype=np.float64)
    cells = np.minimum(np.floor(x / step), levels - 1)
    return (cells + 0.5) * step


def uniform_mse(samples, step: float, levels: int) -> float:
    x = np.asarray(samples, dtype=np.float64)
    d = x - uniform_quantize(x, step, levels)
    return float(np.dot(d, d) / x.size)


class _SortedSamples:
    """Prefix sums over sorted samples so each MSE costs O(levels log n)."""

    def __init__(self, samples: np.ndarray):
        self.x = np.sort(samples)
        self.n = self.x.size
        self.p1 = np.concatenate(([0.0], np.cumsum(self.x)))
        self.p2 = np.concatenate(([0.0], np.cumsum(self.x * self.x)))

    def mse(self, step: float, levels: int) -> float:
        edges = step * np.arange(1, levels, dtype=np.float64)
        idx = np.concatenate(([0], np.searchsorted(self.x, edges, side="left"), [self.n]))
        lo, hi = idx[:-1], idx[1:]
        cnt = hi - lo
        s1 = self.p1[hi] - self.p1[lo]
        s2 = self.p2[hi] - self.p2[lo]
        centers = (np.arange(levels, dtype=np.float64) + 0.5) * step
        sse = np.sum(s2 - 2.0 * centers * s1 + centers * centers * cnt)
        return max(float(sse), 0.0) / self.n


MIN_ORACLE_SAMPLES = 10_000


def brute_force_design(levels: int, samples, points: int = 401, refine: bool = True):
    """Empirically MSE-optimal step of the one-sided ``levels``-level uniform quantizer.

    The step is swept over ``points`` log-spaced values spanning a factor of
    16 either side of a std-based initial guess; with ``refine`` the sweep is
    repeated between the neighbours of the best coarse point. Returns
    ``(step, mse)``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < MIN_ORACLE_SAMPLES:
        raise InvalidSampleError(
            f"brute-force design needs at least {MIN_ORACLE_SAMPLES} samples, got {x.size}"
        )
    if levels < 2:
        raise ValueError(f"need at least 2 levels, got {levels}")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise InvalidSampleError("brute-force design expects finite non-negative samples")
    if points < 200:
        raise ValueError("the sweep needs at least 200 points")

    guess = (x.mean() + 3.0 * x.std()) / levels
    if not guess > 0:
        raise InvalidSampleError("samples are all zero")
    table = _SortedSamples(x)

    grid = guess * np.exp2(np.linspace(-4.0, 4.0, points))
    errs = np.array([table.mse(s, levels) for s in grid])
    best = int(np.argmin(errs))
    step, mse = float(grid[best]), float(errs[best])
    if refine:
        lo = grid[max(best - 1, 0)]
        hi = grid[min(best + 1, points - 1)]
        fine = np.geomspace(lo, hi, points)
        fine_errs = np.array([table.mse(s, levels) for s in fine])
        j = int(np.argmin(fine_errs))
        if fine_errs[j] < mse:
            step, mse = float(fine[j]), float(fine_errs[j])
    return step, mse

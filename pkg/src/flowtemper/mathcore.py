"""Deterministic numeric kernels and seeded randomness.

Everything here is pure given an :class:`RngStream`, so concurrent use is safe
as long as each caller owns its own stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Finalizer from splitmix64; mixes tags into substream keys.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        # FNV-1a, stable across processes (unlike builtin hash()).
        h = 0xCBF29CE484222325
        for b in tag.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        return h
    raise TypeError(f"rng stream tag must be int or str, got {type(tag).__name__}")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    The same (seed, stream_id) always yields the same sample sequence;
    distinct stream ids give statistically independent streams (Philox).
    """

    seed: int
    stream_id: int = 0

    def child(self, *tags) -> "RngStream":
        """Derive a reproducible substream from hashable tags (ints/strings)."""
        sid = self.stream_id & _MASK64
        for tag in tags:
            sid = _splitmix64(sid ^ _splitmix64(_tag_to_int(tag)))
        return RngStream(self.seed, sid)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class Probability:
    """A real number constrained to [0, 1] (quantile levels, thresholds)."""

    value: float

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"probability must lie in [0, 1], got {self.value}")

    def __float__(self) -> float:
        return self.value


def _as_prob(alpha) -> float:
    return float(alpha) if isinstance(alpha, Probability) else float(alpha)


def _regularized_lower_gamma(a: float, x: float) -> float:
    """P(a, x), the regularized lower incomplete gamma function.

    Series expansion for x < a + 1, continued fraction otherwise
    (both standard; accurate to ~1e-14 for the dof range used here).
    """
    if x < 0 or a <= 0:
        raise ValueError("require x >= 0 and a > 0")
    if x == 0.0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        # Lower series: x^a e^-x / Gamma(a) * sum x^n / (a)_{n+1}
        term = 1.0 / a
        total = term
        n = a
        for _ in range(500):
            n += 1.0
            term *= x / n
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(-x + a * math.log(x) - lg)
    # Upper continued fraction (Lentz), Q(a, x); return 1 - Q.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    q = math.exp(-x + a * math.log(x) - lg) * h
    return 1.0 - q


def chi2_quantile(dof: int, alpha) -> float:
    """Inverse CDF of the chi-squared distribution with `dof` degrees of freedom.

    Solved by bisection on the regularized lower incomplete gamma to an
    absolute tolerance of 1e-10 in x.
    """
    a = _as_prob(alpha)
    if dof < 1:
        raise ValueError("invalid dof")
    if a >= 1.0:
        raise ValueError("quantile diverges")
    if a < 0.0:
        raise ValueError(f"alpha must lie in [0, 1), got {a}")
    if a == 0.0:
        return 0.0
    half = 0.5 * dof
    lo, hi = 0.0, max(4.0 * dof, 10.0)
    while _regularized_lower_gamma(half, 0.5 * hi) < a:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("chi2_quantile bracket expansion failed")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if _regularized_lower_gamma(half, 0.5 * mid) < a:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_logpdf(x, mean, var: float) -> float:
    """Log density of an isotropic Gaussian N(mean, var*I) at x."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != mean.shape:
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, mean {mean.shape}")
    if not var > 0:
        raise ValueError(f"variance must be positive, got {var}")
    d = x.size
    return -0.5 * d * math.log(2.0 * math.pi * var) - float(np.sum((x - mean) ** 2)) / (2.0 * var)


def gaussian_logpdf_rows(x: np.ndarray, var) -> np.ndarray:
    """Row-wise isotropic Gaussian log density, zero mean.

    `var` may be a scalar or a per-row vector (per-sample temperature).
    """
    x = np.asarray(x, dtype=float)
    var = np.asarray(var, dtype=float)
    d = x.shape[1]
    return -0.5 * d * np.log(2.0 * np.pi * var) - np.sum(x * x, axis=1) / (2.0 * var)


def log_sum_exp(values) -> float:
    """Overflow-free log(sum(exp(values))) for a nonempty vector."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp of empty input")
    m = float(np.max(v))
    if not math.isfinite(m):
        # All -inf stays -inf; a +inf or NaN input propagates.
        return m
    return m + math.log(float(np.sum(np.exp(v - m))))


def sample_standard_normal(rng: RngStream, dim: int) -> np.ndarray:
    """i.i.d. standard normal vector, deterministic for a fixed stream."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return rng.generator().standard_normal(dim)


def sample_standard_normal_matrix(rng: RngStream, n: int, dim: int) -> np.ndarray:
    """n x dim matrix of standard normal draws from one stream."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be >= 1")
    return rng.generator().standard_normal((n, dim))

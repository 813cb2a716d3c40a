"""Per-input probability-mass sets, a no-guarantee baseline.

Each set is chosen so that the forecast itself assigns it at least
``1 - epsilon`` mass. Nothing is learned from validation data, so when the
forecast is miscalibrated the sets miss their target.
"""

from __future__ import annotations

import math

import numpy as np

from .confset import Threshold
from .forecaster import LOG_2PI, CategoricalForecast, GaussianForecast

__all__ = [
    "chi2_cdf",
    "chi2_quantile",
    "mass_set_categorical",
    "mass_set_gaussian",
    "regularized_lower_gamma",
]

_EPS = 1e-16
_TINY = 1e-300


def _gamma_series(s: float, x: float) -> float:
    term = 1.0 / s
    total = term
    a = s
    for _ in range(10_000):
        a += 1.0
        term *= x / a
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _gamma_cont_frac(s: float, x: float) -> float:
    """Upper regularized gamma Q(s, x) by modified Lentz."""
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + s * math.log(x) - math.lgamma(s)) * h


def regularized_lower_gamma(s: float, x: float) -> float:
    """P(s, x) = gamma(s, x) / Gamma(s)."""
    if s <= 0:
        raise ValueError("shape must be positive")
    if x <= 0:
        return 0.0
    if x < s + 1.0:
        return min(1.0, _gamma_series(s, x))
    return max(0.0, 1.0 - _gamma_cont_frac(s, x))


def chi2_cdf(x: float, dof: int) -> float:
    return regularized_lower_gamma(0.5 * dof, 0.5 * x)


def chi2_quantile(p: float, dof: int, tol: float = 1e-10) -> float:
    """Inverse chi-square CDF by bisection.

    Stops once both the quantile and its square root are bracketed to within
    ``tol``, so radii near zero are as accurate as large ones.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    if p == 0.0:
        return 0.0
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < p:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol or math.sqrt(hi) - math.sqrt(lo) > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if chi2_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mass_set_categorical(f: CategoricalForecast, epsilon: float) -> list[int]:
    """Smallest high-probability-first label set with mass >= 1 - epsilon.

    Equal probabilities are ranked by label index. The result is returned in
    ascending label order.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    p = f.probs
    order = np.argsort(-p, kind="stable")
    mass = np.cumsum(p[order])
    hits = np.flatnonzero(mass >= 1.0 - epsilon)
    count = int(hits[0]) + 1 if hits.size else p.size
    return sorted(int(i) for i in order[:count])


def mass_set_gaussian(f: GaussianForecast, epsilon: float) -> Threshold:
    """Per-input threshold whose ellipsoid carries ``1 - epsilon`` of ``f``'s mass."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    r2 = chi2_quantile(1.0 - epsilon, f.dim)
    return Threshold(0.5 * r2 + 0.5 * f.dim * LOG_2PI + 0.5 * f.logdet)

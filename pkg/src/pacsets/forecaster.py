"""Probability forecasts and temperature scaling.

A forecast is the output of a black-box model for one input: a categorical
distribution over labels or a Gaussian over R^d. Temperature scaling maps a
forecast ``f`` to the normalized density proportional to ``f ** tau``; for a
Gaussian this is ``N(mu, Sigma / tau)``. Under this convention ``tau < 1``
flattens a forecast and ``tau > 1`` sharpens it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "AllInfinite",
    "CategoricalForecast",
    "EmptyCalibration",
    "GaussianForecast",
    "LOG_PROB_FLOOR",
    "TAU_MAX",
    "TAU_MIN",
    "Temperature",
    "apply_temperature",
    "categorical_nll",
    "fit_temperature",
    "gaussian_nll",
    "golden_section_min",
    "log_prob",
    "minimize_tau",
    "temperature_nll",
]

TAU_MIN = 1e-4
TAU_MAX = 1e4
LOG_PROB_FLOOR = -700.0
LOG_2PI = math.log(2.0 * math.pi)


class EmptyCalibration(ValueError):
    pass


class AllInfinite(ValueError):
    """The calibration likelihood is non-finite for every candidate tau."""


@dataclass(frozen=True, eq=False)
class CategoricalForecast:
    log_probs: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=float).reshape(-1)
        if lp.size < 2:
            raise ValueError("a categorical forecast needs at least two labels")
        if np.any(np.isnan(lp)) or np.any(lp == np.inf):
            raise ValueError("log-probabilities must be finite or -inf")
        if not np.any(np.isfinite(lp)):
            raise ValueError("at least one label must have positive probability")
        if np.any(lp > 1e-12):
            raise ValueError("log-probabilities must be <= 0")
        total = logsumexp(lp)
        if abs(total) > 1e-8:
            raise ValueError(f"probabilities do not sum to one (log-sum-exp = {total:.3g})")
        lp.setflags(write=False)
        object.__setattr__(self, "log_probs", lp)

    @classmethod
    def from_probs(cls, probs) -> "CategoricalForecast":
        p = np.asarray(probs, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(np.log(p / p.sum()))

    @classmethod
    def from_logits(cls, logits) -> "CategoricalForecast":
        z = np.asarray(logits, dtype=float)
        return cls(z - logsumexp(z))

    @property
    def num_labels(self) -> int:
        return self.log_probs.size

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass(frozen=True, eq=False)
class GaussianForecast:
    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = mean.size
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("mean and covariance must be finite")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        for arr in (mean, cov, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def scalar(cls, mu: float, sigma: float) -> "GaussianForecast":
        return cls(np.array([mu]), np.array([[sigma * sigma]]))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def mahalanobis_sq(self, y) -> float:
        diff = np.asarray(y, dtype=float).reshape(-1) - self.mean
        if diff.size != self.dim:
            raise ValueError(f"expected a {self.dim}-vector, got size {diff.size}")
        z = np.linalg.solve(self._chol, diff)
        return float(z @ z)

    def log_density(self, y) -> float:
        return -0.5 * (self.mahalanobis_sq(y) + self.dim * LOG_2PI + self.logdet)

    def marginal(self, index: int) -> "GaussianForecast":
        return GaussianForecast(self.mean[[index]], self.cov[np.ix_([index], [index])])


Forecast = Union[CategoricalForecast, GaussianForecast]


@dataclass(frozen=True)
class Temperature:
    """Fitted temperature. ``component`` is None for a global scope."""

    tau: float
    component: int | None = None

    def __post_init__(self):
        if not TAU_MIN <= self.tau <= TAU_MAX:
            raise ValueError(f"tau={self.tau} outside [{TAU_MIN}, {TAU_MAX}]")

    @property
    def scope(self) -> str:
        return "global" if self.component is None else f"component[{self.component}]"


def log_prob(f, y) -> float:
    """Log-probability (categorical) or log-density (Gaussian) of ``y``."""
    if isinstance(f, CategoricalForecast):
        label = int(y)
        if label != y or not 0 <= label < f.num_labels:
            raise ValueError(f"label {y!r} outside 0..{f.num_labels - 1}")
        return float(f.log_probs[label])
    if isinstance(f, GaussianForecast):
        return f.log_density(y)
    # trajectories and anything else exposing the same hook
    return f.log_prob(y)


def apply_temperature(f, t: Temperature | float):
    tau = t.tau if isinstance(t, Temperature) else float(t)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if isinstance(f, CategoricalForecast):
        scaled = tau * f.log_probs
        return CategoricalForecast(scaled - logsumexp(scaled))
    if isinstance(f, GaussianForecast):
        if tau == 1.0:
            return f
        return GaussianForecast(f.mean, f.cov / tau)
    return f.with_temperature(tau)


def golden_section_min(fun, lo: float, hi: float, tol: float = 1e-8, max_iter: int = 200):
    """Minimize a unimodal ``fun`` on ``[lo, hi]``; returns ``(x, fun(x))``.

    Stops once the bracket is narrower than ``tol`` or after ``max_iter``
    shrink steps.
    """
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


def categorical_nll(log_probs, labels):
    """Return ``tau -> NLL`` for a stacked ``(m, Y)`` log-prob matrix."""
    lp = np.maximum(np.asarray(log_probs, dtype=float), LOG_PROB_FLOOR)
    labels = np.asarray(labels, dtype=int)
    if lp.ndim != 2 or labels.shape != (lp.shape[0],):
        raise ValueError("expected an (m, Y) matrix and m labels")
    if lp.shape[0] == 0:
        raise EmptyCalibration("no calibration examples")
    if np.any(labels < 0) or np.any(labels >= lp.shape[1]):
        raise ValueError("calibration label outside the forecast's label range")
    sum_true = float(np.sum(lp[np.arange(labels.size), labels]))

    def nll(tau: float) -> float:
        return float(np.sum(logsumexp(tau * lp, axis=1))) - tau * sum_true

    return nll


def gaussian_nll(mahalanobis_sq, logdets, dim: int):
    """Return ``tau -> NLL`` for Gaussians with precomputed Mahalanobis terms.

    Uses ``log N(y; mu, Sigma/tau) = -tau q / 2 + (d/2) log tau - (d/2) log 2pi
    - (1/2) log det Sigma``.
    """
    q_sum = float(np.sum(mahalanobis_sq))
    m = np.size(mahalanobis_sq)
    if m == 0:
        raise EmptyCalibration("no calibration examples")
    const = 0.5 * float(np.sum(logdets)) + 0.5 * m * dim * LOG_2PI

    def nll(tau: float) -> float:
        return 0.5 * tau * q_sum - 0.5 * m * dim * math.log(tau) + const

    return nll


def temperature_nll(calibration: Sequence[tuple], component: int | None = None):
    """Return ``tau -> -sum log f_tau(y|x)`` over the calibration pairs."""
    if len(calibration) == 0:
        raise EmptyCalibration("no calibration examples")
    first = calibration[0][0]
    if component is not None:
        if not isinstance(first, GaussianForecast):
            raise ValueError("per-component temperature needs Gaussian forecasts")
        calibration = [
            (f.marginal(component), np.asarray(y, dtype=float).reshape(-1)[component])
            for f, y in calibration
        ]
    if all(isinstance(f, CategoricalForecast) for f, _ in calibration):
        sizes = {f.num_labels for f, _ in calibration}
        if len(sizes) != 1:
            raise ValueError("calibration forecasts differ in label count")
        lp = np.stack([f.log_probs for f, _ in calibration])
        return categorical_nll(lp, [int(y) for _, y in calibration])
    if all(isinstance(f, GaussianForecast) for f, _ in calibration):
        dims = {f.dim for f, _ in calibration}
        if len(dims) != 1:
            raise ValueError("calibration forecasts differ in dimension")
        q = [f.mahalanobis_sq(y) for f, y in calibration]
        return gaussian_nll(q, [f.logdet for f, _ in calibration], dims.pop())
    raise ValueError("calibration forecasts must all be of one kind")


def fit_temperature(calibration: Sequence[tuple], component: int | None = None) -> Temperature:
    """Maximum-likelihood temperature on ``[TAU_MIN, TAU_MAX]``.

    ``calibration`` is a sequence of ``(forecast, true_label)`` pairs. The
    search runs golden-section over ``log tau``; the NLL is convex in ``tau``
    so it is unimodal in ``log tau``. Endpoints are compared explicitly so a
    likelihood that keeps improving toward a bound returns that bound.
    """
    return Temperature(minimize_tau(temperature_nll(calibration, component)), component)


def minimize_tau(nll) -> float:
    """Golden-section search for the minimizing tau of a convex NLL."""

    def objective(log_tau: float) -> float:
        val = nll(math.exp(log_tau))
        return val if math.isfinite(val) else math.inf

    # tolerance on log tau is a relative tolerance on tau
    log_tau, best = golden_section_min(objective, math.log(TAU_MIN), math.log(TAU_MAX))
    tau = min(max(math.exp(log_tau), TAU_MIN), TAU_MAX)
    for edge in (TAU_MIN, TAU_MAX):
        val = objective(math.log(edge))
        if val <= best:
            tau, best = edge, val
    if not math.isfinite(best):
        raise AllInfinite("negative log-likelihood is infinite for every tau")
    return tau

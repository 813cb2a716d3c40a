"""Confidence sets ``C_T(x) = {y : log f(y|x) >= -T}`` and their sizes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forecaster import LOG_2PI, CategoricalForecast, GaussianForecast, log_prob

__all__ = [
    "EllipsoidSet",
    "Interval",
    "NumericallySingular",
    "Threshold",
    "bounding_box",
    "categorical_set",
    "ellipsoid_from_radius",
    "ellipsoid_set",
    "gaussian_radius_sq",
    "interval_set",
    "member",
]

MAX_CONDITION = 1e12


class NumericallySingular(ValueError):
    pass


@dataclass(frozen=True)
class Threshold:
    """Log-density cutoff; ``y`` is covered iff ``log f(y|x) >= -t``."""

    t: float

    def __post_init__(self):
        if math.isnan(self.t):
            raise ValueError("threshold is NaN")

    def __float__(self) -> float:
        return float(self.t)


def _t(T) -> float:
    return float(T.t) if isinstance(T, Threshold) else float(T)


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    empty: bool = False

    @property
    def size(self) -> float:
        return 0.0 if self.empty else self.hi - self.lo

    def contains(self, y: float) -> bool:
        return not self.empty and self.lo <= y <= self.hi


@dataclass(frozen=True, eq=False)
class EllipsoidSet:
    """``center + axes @ u`` for unit vectors ``u`` traces the boundary."""

    center: np.ndarray
    axes: np.ndarray
    radius_sq: float
    size: float

    @property
    def empty(self) -> bool:
        return not self.radius_sq > 0


def categorical_set(f: CategoricalForecast, T) -> list[int]:
    return [int(i) for i in np.flatnonzero(f.log_probs >= -_t(T))]


def interval_set(f: GaussianForecast, T) -> Interval:
    if f.dim != 1:
        raise ValueError("interval_set needs a one-dimensional Gaussian")
    mu = float(f.mean[0])
    sigma = math.sqrt(float(f.cov[0, 0]))
    radicand = 2.0 * (_t(T) - math.log(sigma * math.sqrt(2.0 * math.pi)))
    if radicand < 0:
        return Interval(mu, mu, empty=True)
    h = sigma * math.sqrt(radicand)
    return Interval(mu - h, mu + h)


def gaussian_radius_sq(logdet: float, dim: int, T) -> float:
    """Squared Mahalanobis radius ``2T - d log 2pi - log det Sigma``."""
    return 2.0 * _t(T) - dim * LOG_2PI - logdet


def _eigh_fixed_sign(cov: np.ndarray):
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 0 or evals[-1] / evals[0] > MAX_CONDITION:
        raise NumericallySingular(
            f"covariance condition number exceeds {MAX_CONDITION:.0e}"
        )
    # make each column's largest-magnitude entry positive
    idx = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[idx, np.arange(evecs.shape[1])])
    return evals, evecs * signs


def ellipsoid_from_radius(center, cov, radius_sq: float) -> EllipsoidSet:
    """Ellipsoid ``{y : (y-c)^T cov^-1 (y-c) <= radius_sq}``.

    The axis matrix comes from the eigendecomposition ``Q D Q^T`` of
    ``cov^-1 / radius_sq``: ``axes = Q D^{-1/2}``. Its Frobenius norm is
    ``sqrt(radius_sq * trace(cov))``.
    """
    center = np.asarray(center, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    d = center.size
    evals, evecs = _eigh_fixed_sign(cov)
    if not radius_sq > 0:
        return EllipsoidSet(center, np.zeros((d, d)), float(radius_sq), 0.0)
    # eigenvalues of cov^-1 / r^2 ascending == eigenvalues of cov descending
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    axes = evecs * np.sqrt(radius_sq * evals)
    size = float(np.linalg.norm(axes, "fro"))
    return EllipsoidSet(center, axes, float(radius_sq), size)


def ellipsoid_set(f: GaussianForecast, T) -> EllipsoidSet:
    r2 = gaussian_radius_sq(f.logdet, f.dim, T)
    return ellipsoid_from_radius(f.mean, f.cov, r2)


def member(f, T, y) -> bool:
    """True iff ``log f(y|x) >= -T``; exact ties are members."""
    return log_prob(f, y) >= -_t(T)


def bounding_box(e: EllipsoidSet) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box enclosing the ellipsoid (for plotting only)."""
    if e.empty:
        return e.center.copy(), e.center.copy()
    half = np.sqrt(np.sum(e.axes**2, axis=1))
    return e.center - half, e.center + half

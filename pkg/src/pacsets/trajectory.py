"""Multi-step trajectory forecasts built from a one-step Gaussian dynamics model.

The mean trajectory follows the model's mean map from ``x0``; step ``t`` gets
the accumulated covariance ``Sigma(xbar_0) + ... + Sigma(xbar_{t-1})``. The
joint forecast over ``x_{1:H}`` is the block-diagonal Gaussian with these
blocks, optionally with one temperature per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .confset import EllipsoidSet, ellipsoid_from_radius, _t
from .forecaster import (
    LOG_2PI,
    EmptyCalibration,
    GaussianForecast,
    fit_temperature,
    gaussian_nll,
    minimize_tau,
)

__all__ = [
    "DynamicsModel",
    "LinearGaussian",
    "TabulatedDynamics",
    "TrajectoryForecast",
    "TrajectorySet",
    "calibrate_trajectory",
    "per_step_sets",
    "rollout",
    "sample_truth",
    "trajectory_log_score",
]


class DynamicsModel(Protocol):
    dim: int

    def step(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(mu(x), Sigma(x))`` of the one-step forecast."""
        ...


@dataclass(frozen=True, eq=False)
class LinearGaussian:
    """``x' ~ N(A x + b, Q)``. ``Q`` may be zero (deterministic dynamics)."""

    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        b = np.asarray(self.b, dtype=float).reshape(-1) if self.b is not None else np.zeros(d)
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if A.shape != (d, d) or b.shape != (d,) or Q.shape != (d, d):
            raise ValueError("A, b, Q have inconsistent shapes")
        if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Q", Q)

    @classmethod
    def identity(cls, dim: int, noise: float = 1.0) -> "LinearGaussian":
        return cls(np.eye(dim), np.zeros(dim), noise * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def step(self, x):
        return self.A @ np.asarray(x, dtype=float) + self.b, self.Q


class TabulatedDynamics:
    """Dynamics given as a lookup table ``state -> (mean, cov)``.

    Keys are exact float tuples; this is how precomputed model outputs along
    a mean rollout are replayed.
    """

    def __init__(self, table: dict[tuple, tuple[np.ndarray, np.ndarray]]):
        if not table:
            raise ValueError("empty dynamics table")
        self._table = {
            tuple(map(float, k)): (np.asarray(m, dtype=float), np.atleast_2d(np.asarray(c, dtype=float)))
            for k, (m, c) in table.items()
        }
        self.dim = len(next(iter(self._table)))

    @classmethod
    def from_steps(cls, x0, steps: Sequence[tuple]) -> "TabulatedDynamics":
        """Build from ``[(mean_1, cov_1), ...]`` recorded along the mean rollout."""
        table = {}
        x = np.asarray(x0, dtype=float)
        for t, (mean, cov) in enumerate(steps):
            key = tuple(float(v) for v in x.reshape(-1))
            mean = np.asarray(mean, dtype=float).reshape(-1)
            cov = np.atleast_2d(np.asarray(cov, dtype=float))
            if key in table:
                m0, c0 = table[key]
                if not (np.array_equal(m0, mean) and np.array_equal(c0, cov)):
                    raise ValueError(f"step {t} revisits state {key} with a different model output")
            table[key] = (mean, cov)
            x = mean
        return cls(table)

    def step(self, x):
        key = tuple(float(v) for v in np.asarray(x, dtype=float).reshape(-1))
        try:
            return self._table[key]
        except KeyError:
            raise KeyError(f"state {key} not in dynamics table") from None


@dataclass(frozen=True, eq=False)
class TrajectoryForecast:
    means: np.ndarray  # (H, d)
    step_covs: np.ndarray  # (H, d, d), accumulated
    taus: np.ndarray | None = None  # (H,) per step or (H, d) per step and dimension

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.step_covs, dtype=float)
        if means.ndim != 2 or covs.shape != means.shape + (means.shape[1],):
            raise ValueError("means must be (H, d) and step_covs (H, d, d)")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "step_covs", covs)
        if self.taus is not None:
            taus = np.asarray(self.taus, dtype=float)
            if taus.shape not in ((self.horizon,), (self.horizon, self.dim)):
                raise ValueError(f"taus shape {taus.shape} does not fit horizon {self.horizon}")
            if np.any(taus <= 0):
                raise ValueError("temperatures must be positive")
            object.__setattr__(self, "taus", taus)

    @property
    def horizon(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def calibrated_cov(self, t: int) -> np.ndarray:
        cov = self.step_covs[t]
        if self.taus is None:
            return cov
        tau = self.taus[t]
        if np.ndim(tau) == 0:
            return cov / tau
        s = 1.0 / np.sqrt(tau)
        return cov * np.outer(s, s)

    def step_forecast(self, t: int) -> GaussianForecast:
        """Calibrated Gaussian for step ``t`` (0-based)."""
        return GaussianForecast(self.means[t], self.calibrated_cov(t))

    def log_prob(self, truth) -> float:
        return trajectory_log_score(self, truth)

    def with_temperature(self, taus) -> "TrajectoryForecast":
        taus = np.asarray(taus, dtype=float)
        if taus.ndim == 0:
            taus = np.full(self.horizon, float(taus))
        return TrajectoryForecast(self.means, self.step_covs, taus)

    def joint_logdet(self) -> float:
        return sum(self.step_forecast(t).logdet for t in range(self.horizon))


def rollout(m: DynamicsModel, x0, H: int) -> TrajectoryForecast:
    if H < 1:
        raise ValueError("horizon must be at least 1")
    x = np.asarray(x0, dtype=float).reshape(-1)
    d = x.size
    means = np.empty((H, d))
    covs = np.empty((H, d, d))
    acc = np.zeros((d, d))
    for t in range(H):
        mu, sigma = m.step(x)
        acc = acc + np.asarray(sigma, dtype=float)
        means[t] = mu
        covs[t] = acc
        x = np.asarray(mu, dtype=float).reshape(-1)
    return TrajectoryForecast(means, covs)


def sample_truth(m: DynamicsModel, x0, H: int, seed) -> np.ndarray:
    """One ground-truth trajectory ``x*_{1:H}`` of shape ``(H, d)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x0, dtype=float).reshape(-1)
    out = np.empty((H, x.size))
    for t in range(H):
        mu, sigma = m.step(x)
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma):
            x = rng.multivariate_normal(mu, sigma, method="eigh")
        else:
            x = np.asarray(mu, dtype=float).copy()
        out[t] = x
    return out


def trajectory_log_score(tf: TrajectoryForecast, truth) -> float:
    """Block-diagonal joint log-density ``sum_t log N(x*_t; xbar_t, cov_t / tau_t)``."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape != tf.means.shape:
        raise ValueError(f"truth shape {truth.shape} does not match forecast {tf.means.shape}")
    return float(sum(tf.step_forecast(t).log_density(truth[t]) for t in range(tf.horizon)))


@dataclass(frozen=True)
class TrajectorySet:
    steps: list[EllipsoidSet]
    radius_sq: float

    @property
    def sizes(self) -> np.ndarray:
        return np.array([e.size for e in self.steps])

    @property
    def mean_size(self) -> float:
        return float(np.mean(self.sizes))

    @property
    def empty(self) -> bool:
        return not self.radius_sq > 0


def per_step_sets(tf: TrajectoryForecast, T) -> TrajectorySet:
    """Project the joint ellipsoid onto each step.

    The joint set is ``sum_t q_t <= r^2`` with ``r^2`` computed on the full
    ``H*d``-dimensional block-diagonal Gaussian; its projection onto step
    ``t`` is ``q_t <= r^2``.
    """
    r2 = 2.0 * _t(T) - tf.horizon * tf.dim * LOG_2PI - tf.joint_logdet()
    steps = [ellipsoid_from_radius(tf.means[t], tf.calibrated_cov(t), r2) for t in range(tf.horizon)]
    return TrajectorySet(steps, float(r2))


def calibrate_trajectory(
    rollouts: Sequence[tuple[TrajectoryForecast, np.ndarray]],
    per_dimension: bool = False,
) -> np.ndarray:
    """Fit one temperature per step on the step-``t`` marginals.

    Returns shape ``(H,)``, or ``(H, d)`` with ``per_dimension``.
    """
    if len(rollouts) < 2:
        raise EmptyCalibration("trajectory calibration needs at least two rollouts")
    H, d = rollouts[0][0].means.shape
    for tf, truth in rollouts:
        if tf.means.shape != (H, d) or np.shape(truth) != (H, d):
            raise ValueError("rollouts differ in horizon or dimension")
    taus = np.empty((H, d)) if per_dimension else np.empty(H)
    for t in range(H):
        pairs = [(GaussianForecast(tf.means[t], tf.step_covs[t]), np.asarray(truth)[t]) for tf, truth in rollouts]
        if per_dimension:
            for i in range(d):
                taus[t, i] = fit_temperature(pairs, component=i).tau
        else:
            taus[t] = fit_temperature(pairs).tau
    return taus


def fit_step_taus(q: np.ndarray, logdets: np.ndarray, dim: int) -> np.ndarray:
    """Per-step temperatures from stacked Mahalanobis terms ``q`` of shape (m, H)."""
    if q.shape[0] < 2:
        raise EmptyCalibration("trajectory calibration needs at least two rollouts")
    return np.array(
        [minimize_tau(gaussian_nll(q[:, t], logdets[:, t], dim)) for t in range(q.shape[1])]
    )

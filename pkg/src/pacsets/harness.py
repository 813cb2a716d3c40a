"""Evaluation and Monte-Carlo verification on synthetic worlds.

Every world knows the exact (or high-precision Monte-Carlo) probability that
a fresh example is excluded by a threshold, so the PAC statement
``P[L(C_T_hat) > epsilon] < delta`` can be checked by simulating many
validation draws.

Per-trial randomness comes from ``numpy.random.SeedSequence([master_seed,
trial_index])``; trials are therefore reproducible individually and the
aggregate does not depend on execution order or worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .baseline import mass_set_categorical
from .bounds import BoundKind, Infeasible, PacParams, direct_alpha, vc_alpha
from .confset import categorical_set, ellipsoid_set, interval_set
from .estimator import Example, FittedArtifact, select_threshold
from .forecaster import (
    LOG_2PI,
    CategoricalForecast,
    GaussianForecast,
    categorical_nll,
    gaussian_nll,
    log_prob,
    minimize_tau,
)
from .trajectory import LinearGaussian, TrajectoryForecast, fit_step_taus, per_step_sets, rollout

__all__ = [
    "CategoricalWorld",
    "ExpScoreWorld",
    "GaussianWorld",
    "LinearGaussianDynamicsWorld",
    "PacReport",
    "SizeStats",
    "TrialRecord",
    "empirical_error",
    "make_world",
    "set_size",
    "size_stats",
    "sweep",
    "trial_rng",
    "verify_pac",
]


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


# ---------------------------------------------------------------------------
# synthetic worlds
# ---------------------------------------------------------------------------


class ExpScoreWorld:
    """Scores ``-log f(y|x)`` are i.i.d. Exp(1); exclusion probability is ``e^-T``."""

    kind = "exp"
    supports_calibration = False

    def __init__(self, seed: int = 0):
        self.seed = seed

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return -rng.exponential(1.0, size=n)

    def log_scores(self, sample, tau=None) -> np.ndarray:
        if tau is not None:
            raise ValueError("the exponential-score world has no forecaster to calibrate")
        return sample

    def fit_tau(self, sample):
        raise ValueError("the exponential-score world has no forecaster to calibrate")

    def true_error(self, T: float, tau=None) -> float:
        return 1.0 if T < 0 else math.exp(-T)

    def sizes(self, sample, T, tau=None) -> np.ndarray | None:
        return None


class CategoricalWorld:
    """Finite set of inputs with true label distributions ``p_x``.

    The reported forecast is ``normalize(p_x ** gamma)``: ``gamma > 1`` is
    overconfident and ``gamma = 1`` is perfectly calibrated. Inputs are drawn
    uniformly, so the exclusion probability is an exact finite sum.
    """

    kind = "categorical"
    supports_calibration = True

    def __init__(self, gamma: float = 3.0, num_inputs: int = 200, num_labels: int = 10,
                 concentration: float = 1.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.gamma = gamma
        self.seed = seed
        p = rng.dirichlet(np.full(num_labels, concentration), size=num_inputs)
        p = np.maximum(p, 1e-12)
        self.p = p / p.sum(axis=1, keepdims=True)
        lq = gamma * np.log(self.p)
        self.log_q = lq - logsumexp(lq, axis=1, keepdims=True)
        self._cdf = np.cumsum(self.p, axis=1)

    @property
    def num_inputs(self) -> int:
        return self.p.shape[0]

    def sample(self, n: int, rng: np.random.Generator):
        xs = rng.integers(self.num_inputs, size=n)
        u = rng.random(n)
        ys = np.minimum((self._cdf[xs] < u[:, None]).sum(axis=1), self.p.shape[1] - 1)
        return xs, ys

    def calibrated_log_q(self, tau=None) -> np.ndarray:
        if tau is None or tau == 1.0:
            return self.log_q
        z = tau * self.log_q
        return z - logsumexp(z, axis=1, keepdims=True)

    def log_scores(self, sample, tau=None) -> np.ndarray:
        xs, ys = sample
        return self.calibrated_log_q(tau)[xs, ys]

    def fit_tau(self, sample) -> float:
        xs, ys = sample
        return minimize_tau(categorical_nll(self.log_q[xs], ys))

    def true_error(self, T: float, tau=None) -> float:
        excluded = self.calibrated_log_q(tau) < -T
        return float(np.sum(self.p * excluded) / self.num_inputs)

    def sizes(self, sample, T, tau=None) -> np.ndarray:
        xs, _ = sample
        return np.sum(self.calibrated_log_q(tau)[xs] >= -T, axis=1).astype(float)

    def correct(self, sample) -> np.ndarray:
        xs, ys = sample
        return np.argmax(self.log_q[xs], axis=1) == ys

    def baseline_sets(self, epsilon: float, tau=None) -> list[list[int]]:
        lq = self.calibrated_log_q(tau)
        return [mass_set_categorical(CategoricalForecast(row), epsilon) for row in lq]

    def baseline_true_error(self, epsilon: float, tau=None) -> float:
        sets = self.baseline_sets(epsilon, tau)
        covered = sum(self.p[x, s].sum() for x, s in enumerate(sets))
        return 1.0 - covered / self.num_inputs

    def examples(self, sample, prefix: str = "") -> list[Example]:
        xs, ys = sample
        return [
            Example(f"{prefix}{i}", CategoricalForecast(self.log_q[x]), int(y))
            for i, (x, y) in enumerate(zip(xs, ys))
        ]


class GaussianWorld:
    """Inputs with true ``N(mu_x, Sigma_x)``; the forecast reports ``N(mu_x, c Sigma_x)``."""

    kind = "gaussian"
    supports_calibration = True

    def __init__(self, dim: int = 1, scale: float = 1.0, num_inputs: int = 100, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.scale = scale
        self.seed = seed
        self.mu = rng.normal(0.0, 3.0, size=(num_inputs, dim))
        covs = []
        for _ in range(num_inputs):
            a = rng.normal(size=(dim, dim))
            covs.append(a @ a.T / dim + rng.uniform(0.2, 2.0) * np.eye(dim))
        self.cov = np.array(covs)
        self.chol = np.linalg.cholesky(self.cov)
        # log det of the reported covariance c * Sigma_x
        self.report_logdet = np.linalg.slogdet(self.cov)[1] + dim * math.log(scale)

    @property
    def num_inputs(self) -> int:
        return self.mu.shape[0]

    def sample(self, n: int, rng: np.random.Generator):
        xs = rng.integers(self.num_inputs, size=n)
        z = rng.standard_normal((n, self.dim))
        # Mahalanobis distance under the reported covariance
        q = np.sum(z * z, axis=1) / self.scale
        return xs, z, q

    def log_scores(self, sample, tau=None) -> np.ndarray:
        xs, _, q = sample
        t = 1.0 if tau is None else float(tau)
        d = self.dim
        return -0.5 * t * q + 0.5 * d * math.log(t) - 0.5 * d * LOG_2PI - 0.5 * self.report_logdet[xs]

    def fit_tau(self, sample) -> float:
        xs, _, q = sample
        return minimize_tau(gaussian_nll(q, self.report_logdet[xs], self.dim))

    def _radius_sq(self, T: float, tau) -> np.ndarray:
        t = 1.0 if tau is None else float(tau)
        # log f_tau(y) >= -T  <=>  t q <= 2T - d log 2pi - logdet(c Sigma / t)
        return 2.0 * T - self.dim * LOG_2PI - (self.report_logdet - self.dim * math.log(t))

    def true_error(self, T: float, tau=None) -> float:
        t = 1.0 if tau is None else float(tau)
        r2 = self._radius_sq(T, tau)
        # q_true = c * q ~ chi2_d, excluded iff t * q > r2
        limit = np.where(r2 > 0, self.scale * np.maximum(r2, 0.0) / t, 0.0)
        return float(np.mean(stats.chi2.sf(limit, self.dim)))

    def forecast(self, x: int, tau=None) -> GaussianForecast:
        t = 1.0 if tau is None else float(tau)
        return GaussianForecast(self.mu[x], self.scale * self.cov[x] / t)

    def sizes(self, sample, T, tau=None) -> np.ndarray:
        xs = sample[0]
        t = 1.0 if tau is None else float(tau)
        r2 = np.maximum(self._radius_sq(T, tau), 0.0)
        tr = np.trace(self.cov, axis1=1, axis2=2) * self.scale / t
        if self.dim == 1:
            # interval length 2 * sqrt(r2 * sigma^2)
            return 2.0 * np.sqrt(r2[xs] * tr[xs])
        return np.sqrt(r2[xs] * tr[xs])

    def examples(self, sample, prefix: str = "") -> list[Example]:
        xs, z, _ = sample
        out = []
        for i, (x, zi) in enumerate(zip(xs, z)):
            y = self.mu[x] + self.chol[x] @ zi
            out.append(Example(f"{prefix}{i}", self.forecast(x), y))
        return out


class LinearGaussianDynamicsWorld:
    """Trajectories of ``x' = A x + w``, ``w ~ N(0, Q)``; the model reports ``scale * Q``.

    Residuals ``x*_t - xbar_t`` do not depend on ``x0`` for linear dynamics, so
    scores are functions of the residual sequence only. The exclusion
    probability is estimated once from ``mc_samples`` fresh trajectories.
    """

    kind = "trajectory"
    supports_calibration = True

    def __init__(self, horizon: int = 20, dim: int = 2, A=None, Q=None, scale: float = 1.0,
                 mc_samples: int = 1_000_000, seed: int = 0):
        self.horizon = horizon
        self.dim = dim
        self.seed = seed
        self.A = np.eye(dim) if A is None else np.asarray(A, dtype=float)
        self.Q = np.eye(dim) if Q is None else np.asarray(Q, dtype=float)
        self.scale = scale
        self.model = LinearGaussian(self.A, np.zeros(dim), scale * self.Q)
        # accumulated covariances along the mean rollout (constant for linear models)
        self.step_covs = rollout(self.model, np.zeros(dim), horizon).step_covs
        self._prec_chol = np.array([np.linalg.cholesky(np.linalg.inv(c)) for c in self.step_covs])
        self.step_logdets = np.array([np.linalg.slogdet(c)[1] for c in self.step_covs])
        self._noise_chol = np.linalg.cholesky(self.Q + 1e-300 * np.eye(dim))
        self.mc_samples = mc_samples
        self._mc_q = None
        self._mc_sorted = None

    def _residuals(self, n: int, rng: np.random.Generator) -> np.ndarray:
        w = rng.standard_normal((n, self.horizon, self.dim)) @ self._noise_chol.T
        e = np.empty_like(w)
        prev = np.zeros((n, self.dim))
        for t in range(self.horizon):
            prev = prev @ self.A.T + w[:, t]
            e[:, t] = prev
        return e

    def _mahalanobis(self, e: np.ndarray) -> np.ndarray:
        # q_t = |L_t^T e_t|^2 where L_t L_t^T = Sigma_t^{-1}
        z = np.einsum("thd,nth->ntd", self._prec_chol, e)
        return np.sum(z * z, axis=2)

    def sample(self, n: int, rng: np.random.Generator):
        x0 = rng.standard_normal((n, self.dim))
        e = self._residuals(n, rng)
        return x0, e, self._mahalanobis(e)

    def _scores_from_q(self, q: np.ndarray, tau=None) -> np.ndarray:
        taus = np.ones(self.horizon) if tau is None else np.broadcast_to(np.asarray(tau, float), (self.horizon,))
        d = self.dim
        const = np.sum(0.5 * d * np.log(taus) - 0.5 * d * LOG_2PI - 0.5 * self.step_logdets)
        return -0.5 * (q @ taus) + const

    def log_scores(self, sample, tau=None) -> np.ndarray:
        return self._scores_from_q(sample[2], tau)

    def fit_tau(self, sample) -> np.ndarray:
        q = sample[2]
        logdets = np.broadcast_to(self.step_logdets, q.shape)
        return fit_step_taus(q, logdets, self.dim)

    def _mc(self) -> np.ndarray:
        if self._mc_q is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x6D63]))
            chunks = []
            left = self.mc_samples
            while left > 0:
                m = min(left, 100_000)
                chunks.append(self._mahalanobis(self._residuals(m, rng)).astype(np.float32))
                left -= m
            self._mc_q = np.concatenate(chunks)
            self._mc_sorted = np.sort(self._scores_from_q(self._mc_q.astype(np.float64)))
        return self._mc_q

    def true_error(self, T: float, tau=None) -> float:
        q = self._mc()
        if tau is None:
            return float(np.searchsorted(self._mc_sorted, -T, side="left") / self.mc_samples)
        taus = np.broadcast_to(np.asarray(tau, dtype=np.float32), (self.horizon,))
        d = self.dim
        const = float(np.sum(0.5 * d * np.log(taus.astype(float)) - 0.5 * d * LOG_2PI
                             - 0.5 * self.step_logdets))
        scores = -0.5 * (q @ taus).astype(np.float64) + const
        return float(np.mean(scores < -T))

    def mc_standard_error(self, p: float) -> float:
        return math.sqrt(max(p * (1.0 - p), 0.0) / self.mc_samples)

    def forecast(self, x0, tau=None) -> TrajectoryForecast:
        tf = rollout(self.model, x0, self.horizon)
        return tf if tau is None else tf.with_temperature(tau)

    def sizes(self, sample, T, tau=None) -> np.ndarray:
        tf = TrajectoryForecast(np.zeros((self.horizon, self.dim)), self.step_covs,
                                None if tau is None else np.broadcast_to(np.asarray(tau, float), (self.horizon,)))
        size = per_step_sets(tf, T).mean_size
        return np.full(len(sample[0]), size)

    def examples(self, sample, prefix: str = "") -> list[Example]:
        x0, e, _ = sample
        out = []
        for i in range(len(x0)):
            tf = self.forecast(x0[i])
            out.append(Example(f"{prefix}{i}", tf, tf.means + e[i]))
        return out


def make_world(kind: str, seed: int = 0, **kw):
    kinds = {
        "exp": ExpScoreWorld,
        "categorical": CategoricalWorld,
        "gaussian": GaussianWorld,
        "trajectory": LinearGaussianDynamicsWorld,
    }
    if kind not in kinds:
        raise ValueError(f"unknown world {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](seed=seed, **kw)


# ---------------------------------------------------------------------------
# evaluation on explicit records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SizeStats:
    median: float
    min: float
    max: float
    mean: float
    count: int

    @classmethod
    def of(cls, sizes) -> "SizeStats":
        a = np.asarray(sizes, dtype=float)
        if a.size == 0:
            raise ValueError("size statistics of an empty set of inputs")
        return cls(float(np.median(a)), float(a.min()), float(a.max()), float(a.mean()), int(a.size))

    def to_dict(self) -> dict:
        return asdict(self)


def set_size(forecast, T) -> float:
    """Size of ``C_T(x)``: label count, interval length, ``||Lambda||_F`` or mean per-step size."""
    if isinstance(forecast, CategoricalForecast):
        return float(len(categorical_set(forecast, T)))
    if isinstance(forecast, GaussianForecast):
        if forecast.dim == 1:
            return interval_set(forecast, T).size
        return ellipsoid_set(forecast, T).size
    if isinstance(forecast, TrajectoryForecast):
        return per_step_sets(forecast, T).mean_size
    raise TypeError(f"unsupported forecast type {type(forecast).__name__}")


def empirical_error(artifact: FittedArtifact, test: Sequence[Example]) -> tuple[Fraction, bool]:
    """Test miscoverage as an exact fraction, and whether it is below epsilon."""
    if not test:
        raise ValueError("empty test set")
    t = artifact.threshold.t
    misses = sum(1 for e in test if not log_prob(artifact.calibrate(e.forecast), e.label) >= -t)
    err = Fraction(misses, len(test))
    return err, err < Fraction(artifact.epsilon)


def size_stats(artifact: FittedArtifact, inputs: Sequence[Example], split: bool = False):
    """Size statistics; with ``split`` returns ``{"correct": ..., "incorrect": ...}``.

    The split compares the forecast's top label with the true label and only
    applies to categorical forecasts.
    """
    if not inputs:
        raise ValueError("no inputs")
    T = artifact.threshold
    sizes = [set_size(artifact.calibrate(e.forecast), T) for e in inputs]
    if not split:
        return SizeStats.of(sizes)
    groups: dict[str, list[float]] = {"correct": [], "incorrect": []}
    for e, s in zip(inputs, sizes):
        if not isinstance(e.forecast, CategoricalForecast):
            raise ValueError("correct/incorrect split needs categorical forecasts")
        ok = int(np.argmax(e.forecast.log_probs)) == int(e.label)
        groups["correct" if ok else "incorrect"].append(s)
    return {k: SizeStats.of(v) if v else None for k, v in groups.items()}


# ---------------------------------------------------------------------------
# PAC verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    tau: float | list | None
    T_hat: float
    effective_k: int
    true_error: float
    failed: bool


@dataclass
class PacReport:
    world: str
    epsilon: float
    delta: float
    n: int
    bound: str
    k_star: int
    calibrated: bool
    trials: int
    failures: int
    failure_rate: float
    failure_upper: float
    master_seed: int
    records: list[TrialRecord] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        d["seed_derivation"] = "numpy.random.SeedSequence([master_seed, trial_index])"
        return d


def _budget(params: PacParams, bound: BoundKind):
    return direct_alpha(params) if bound is BoundKind.DIRECT else vc_alpha(params)


def _tau_repr(tau):
    if tau is None:
        return None
    if np.ndim(tau) == 0:
        return float(tau)
    return [float(v) for v in np.asarray(tau).reshape(-1)]


def _run_trial(world, params: PacParams, k_star: int, calibrate: bool, calibration_size: int,
               seed: int, index: int) -> TrialRecord:
    rng = trial_rng(seed, index)
    tau = world.fit_tau(world.sample(calibration_size, rng)) if calibrate else None
    scores = np.sort(world.log_scores(world.sample(params.n, rng), tau))
    t_hat, k_eff = select_threshold(scores, k_star)
    err = world.true_error(t_hat, tau)
    return TrialRecord(index, _tau_repr(tau), t_hat, k_eff, err, err > params.epsilon)


def one_sided_upper(failures: int, trials: int, level: float = 0.99865) -> float:
    """Clopper-Pearson upper confidence bound on a failure rate (3-sigma level)."""
    if failures >= trials:
        return 1.0
    return float(stats.beta.ppf(level, failures + 1, trials - failures))


def verify_pac(world, p: PacParams, trials: int, calibrate: bool = False,
               bound: str | BoundKind = BoundKind.DIRECT, seed: int = 0,
               calibration_size: int = 1000, workers: int = 1) -> PacReport:
    """Simulate ``trials`` validation draws and count ``L(C_T_hat) > epsilon``."""
    if trials < 100:
        raise ValueError("verify_pac needs at least 100 trials")
    bound = BoundKind(bound)
    if calibrate and not world.supports_calibration:
        raise ValueError(f"world {world.kind!r} does not support calibration")
    budget = _budget(p, bound)

    def run(i):
        return _run_trial(world, p, budget.k_star, calibrate, calibration_size, seed, i)

    if hasattr(world, "_mc"):
        world._mc()  # build the shared Monte-Carlo table before threads start
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, range(trials)))
    else:
        records = [run(i) for i in range(trials)]
    failures = sum(r.failed for r in records)
    return PacReport(
        world=world.kind, epsilon=p.epsilon, delta=p.delta, n=p.n, bound=bound.value,
        k_star=budget.k_star, calibrated=calibrate, trials=trials, failures=failures,
        failure_rate=failures / trials, failure_upper=one_sided_upper(failures, trials),
        master_seed=seed, records=records,
    )


def sweep(world, epsilons: Sequence[float], deltas: Sequence[float], n: int,
          calibrate: bool = False, bound: str | BoundKind = BoundKind.DIRECT, seed: int = 0,
          calibration_size: int = 1000, test_size: int = 5000) -> list[dict]:
    """Threshold, sizes and validity over an (epsilon, delta) grid.

    One calibration, validation and test draw is shared by all grid points, so
    differences between rows come from the budget alone.
    """
    bound = BoundKind(bound)
    rng = trial_rng(seed, 0)
    tau = world.fit_tau(world.sample(calibration_size, rng)) if calibrate else None
    val_scores = np.sort(world.log_scores(world.sample(n, rng), tau))
    test = world.sample(test_size, rng)
    test_scores = world.log_scores(test, tau)
    rows = []
    for eps in epsilons:
        for dlt in deltas:
            row = {"epsilon": eps, "delta": dlt, "n": n, "bound": bound.value,
                   "calibrated": calibrate, "tau": _tau_repr(tau)}
            try:
                budget = _budget(PacParams(eps, dlt, n), bound)
            except Infeasible as exc:
                row.update(status="infeasible", reason=exc.reason, k_star=None, T_hat=None,
                           test_error=None, true_error=None, valid=None,
                           size_median=None, size_min=None, size_max=None, size_mean=None)
                rows.append(row)
                continue
            t_hat, k_eff = select_threshold(val_scores, budget.k_star)
            test_err = float(np.mean(test_scores < -t_hat))
            row.update(status="ok", reason=None, k_star=budget.k_star, T_hat=t_hat,
                       test_error=test_err, true_error=world.true_error(t_hat, tau),
                       valid=test_err < eps)
            sizes = world.sizes(test, t_hat, tau)
            if sizes is None:
                row.update(size_median=None, size_min=None, size_max=None, size_mean=None)
            else:
                st = SizeStats.of(sizes)
                row.update(size_median=st.median, size_min=st.min, size_max=st.max, size_mean=st.mean)
            rows.append(row)
    return rows

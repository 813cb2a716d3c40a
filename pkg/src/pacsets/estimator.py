"""Threshold selection on validation scores.

Given ``n`` validation log-scores ``log f(y_i | x_i)`` and a budget ``k*``,
the smallest threshold whose empirical miscoverage is at most ``k*/n`` is
``-s_(k*+1)``, the negated ``(k*+1)``-st smallest score. With ties at that
position the effective ``k`` is decremented until the next score is strictly
larger; the threshold itself does not move.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from .bounds import BoundKind, Budget, PacParams, direct_alpha, vc_alpha
from .confset import Threshold
from .forecaster import EmptyCalibration, apply_temperature, fit_temperature, log_prob
from .trajectory import TrajectoryForecast, calibrate_trajectory

__all__ = [
    "T_CAP",
    "DegenerateScores",
    "Diagnostic",
    "Example",
    "FittedArtifact",
    "ScoredExample",
    "ThresholdFit",
    "apply_tau",
    "empirical_risk",
    "end_to_end",
    "fit_threshold",
    "score_examples",
    "select_threshold",
]

# cap on T-hat when the (k*+1)-st score is -inf
T_CAP = 700.0


class DegenerateScores(ValueError):
    pass


@dataclass(frozen=True)
class ScoredExample:
    log_score: float
    id: str = ""


@dataclass(frozen=True)
class Diagnostic:
    code: str
    detail: str

    def to_dict(self) -> dict:
        return {"code": self.code, "detail": self.detail}


@dataclass(frozen=True)
class Example:
    """A forecast together with its observed label."""

    id: str
    forecast: Any
    label: Any


@dataclass(frozen=True)
class ThresholdFit:
    threshold: Threshold
    effective_k: int
    diagnostics: tuple[Diagnostic, ...] = ()

    def __iter__(self):
        # allows ``T, k = fit_threshold(...)``
        return iter((self.threshold, self.effective_k))


def _as_scores(scores) -> list[ScoredExample]:
    out = []
    for i, s in enumerate(scores):
        if isinstance(s, ScoredExample):
            out.append(s)
        else:
            out.append(ScoredExample(float(s), str(i)))
    return out


def empirical_risk(T, scores) -> Fraction:
    """Fraction of scores strictly below ``-T`` (excluded examples)."""
    t = float(T.t) if isinstance(T, Threshold) else float(T)
    values = [s.log_score if isinstance(s, ScoredExample) else float(s) for s in scores]
    if not values:
        raise ValueError("empirical risk of an empty score list")
    return Fraction(sum(1 for v in values if v < -t), len(values))


def fit_threshold(scores, b: Budget) -> ThresholdFit:
    items = _as_scores(scores)
    n = len(items)
    if n != b.n:
        raise ValueError(f"budget was computed for n={b.n} but {n} scores were given")
    if any(math.isnan(s.log_score) for s in items):
        raise DegenerateScores("validation scores contain NaN")
    if b.k_star >= n:
        raise ValueError("k_star must be smaller than the number of scores")
    items.sort(key=lambda s: (s.log_score, s.id))
    s = [it.log_score for it in items]

    diags = []
    finite = [v for v in s if math.isfinite(v)]
    dupes = sum(c - 1 for c in Counter(finite).values() if c > 1)
    if dupes:
        diags.append(Diagnostic(
            "tied_scores",
            f"{dupes} duplicate validation scores; the score distribution may have atoms",
        ))

    t_hat, k = select_threshold(s, b.k_star)
    if s[b.k_star] == -math.inf:
        diags.append(Diagnostic(
            "continuity_violation",
            f"{sum(1 for v in s if v == -math.inf)} validation labels have zero probability "
            f"and k*={b.k_star} cannot absorb them; T_hat capped at {T_CAP}",
        ))
    return ThresholdFit(Threshold(t_hat), k, tuple(diags))


def select_threshold(sorted_scores, k_star: int) -> tuple[float, int]:
    """Core of ``fit_threshold`` on already ascending-sorted scores.

    Returns ``(T_hat, effective_k)``.
    """
    s = sorted_scores
    k = int(k_star)
    while k > 0 and not s[k] > s[k - 1]:
        k -= 1
    if s[k] == -math.inf:
        return T_CAP, int(np.count_nonzero(np.asarray(s) < -T_CAP))
    return -float(s[k]), k


def apply_tau(forecast, tau):
    """Calibrated copy of ``forecast``; ``tau`` may be None, a float or per-step array."""
    if tau is None:
        return forecast
    if isinstance(forecast, TrajectoryForecast):
        return forecast.with_temperature(tau)
    return apply_temperature(forecast, float(tau))


def score_examples(examples: Sequence[Example], tau=None) -> list[ScoredExample]:
    return [ScoredExample(log_prob(apply_tau(e.forecast, tau), e.label), e.id) for e in examples]


@dataclass
class FittedArtifact:
    epsilon: float
    delta: float
    n: int
    bound: str
    tau: Any = None
    T_hat: float | None = None
    k_star: int | None = None
    effective_k: int | None = None
    feasible: bool = True
    reason: str | None = None
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def alpha(self) -> float | None:
        return None if self.k_star is None else self.k_star / self.n

    @property
    def threshold(self) -> Threshold:
        if self.T_hat is None:
            raise ValueError("artifact is infeasible and has no threshold")
        return Threshold(self.T_hat)

    def calibrate(self, forecast):
        return apply_tau(forecast, self.tau)

    def to_dict(self) -> dict:
        tau = self.tau
        if isinstance(tau, np.ndarray):
            tau = tau.tolist()
        return {
            "tau": tau,
            "T_hat": self.T_hat,
            "k_star": self.k_star,
            "effective_k": self.effective_k,
            "alpha": self.alpha,
            "n": self.n,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "bound": self.bound,
            "feasible": self.feasible,
            "reason": self.reason,
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedArtifact":
        tau = d.get("tau")
        if isinstance(tau, list):
            tau = np.asarray(tau, dtype=float)
        return cls(
            epsilon=float(d["epsilon"]),
            delta=float(d["delta"]),
            n=int(d["n"]),
            bound=str(d["bound"]),
            tau=tau,
            T_hat=d.get("T_hat"),
            k_star=d.get("k_star"),
            effective_k=d.get("effective_k"),
            feasible=bool(d.get("feasible", True)),
            reason=d.get("reason"),
            diagnostics=[Diagnostic(x["code"], x["detail"]) for x in d.get("diagnostics", [])],
        )


def _fit_tau(calibration: Sequence[Example], tau_mode: str):
    pairs = [(e.forecast, e.label) for e in calibration]
    if pairs and isinstance(pairs[0][0], TrajectoryForecast):
        if tau_mode == "global":
            tau = fit_temperature(
                [(tf.step_forecast(t), np.asarray(y)[t]) for tf, y in pairs for t in range(tf.horizon)]
            )
            return tau.tau
        return calibrate_trajectory(pairs, per_dimension=(tau_mode == "per-step-dim"))
    return fit_temperature(pairs).tau


def end_to_end(
    calibration: Sequence[Example] | None,
    validation: Sequence[Example],
    epsilon: float,
    delta: float,
    bound: str | BoundKind = BoundKind.DIRECT,
    use_calibration: bool = True,
    tau_mode: str = "per-step",
    tau=None,
) -> FittedArtifact:
    """Calibrate (optionally), compute the budget, and pick the threshold.

    ``tau_mode`` only matters for trajectory forecasts: ``"global"``,
    ``"per-step"`` (default) or ``"per-step-dim"``. A precomputed ``tau``
    skips fitting.

    Raises ``Infeasible`` when the bound admits no threshold and
    ``EmptyCalibration`` when calibration is requested without data.
    """
    bound = BoundKind(bound)
    ids = [e.id for e in validation]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in the validation set")
    if calibration is not None:
        overlap = set(ids) & {e.id for e in calibration}
        if overlap:
            raise ValueError(f"calibration and validation share ids: {sorted(overlap)[:5]}")

    if not use_calibration:
        tau = None
    elif tau is None:
        if not calibration:
            raise EmptyCalibration("calibration requested but no calibration examples given")
        tau = _fit_tau(calibration, tau_mode)

    params = PacParams(epsilon, delta, len(validation))
    budget = direct_alpha(params) if bound is BoundKind.DIRECT else vc_alpha(params)
    fit = fit_threshold(score_examples(validation, tau), budget)
    return FittedArtifact(
        epsilon=epsilon,
        delta=delta,
        n=params.n,
        bound=bound.value,
        tau=tau,
        T_hat=fit.threshold.t,
        k_star=budget.k_star,
        effective_k=fit.effective_k,
        diagnostics=list(fit.diagnostics),
    )

"""Validation-error budgets for PAC threshold selection.

Two ways of turning (n, epsilon, delta) into the number of validation
examples a threshold may exclude:

* the direct binomial-tail bound, where the budget is the largest ``k`` with
  ``P[Binomial(n, epsilon) <= k] < delta``;
* the VC-dimension bound for a one-parameter threshold family.

All tail arithmetic happens in natural-log space so that ``n`` in the tens of
thousands does not underflow.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

__all__ = [
    "BoundKind",
    "Budget",
    "Infeasible",
    "PacParams",
    "binomial_tail",
    "direct_alpha",
    "log_binomial_tail",
    "min_n_direct",
    "min_n_vc",
    "vc_alpha",
    "vc_slack",
]

_MAX_N = 2**63 - 1


class BoundKind(str, enum.Enum):
    DIRECT = "direct"
    VC = "vc"


class Infeasible(Exception):
    """No threshold can be certified at the requested (n, epsilon, delta).

    ``min_n`` is the smallest validation-set size at which the same bound
    would admit ``k = 0``.
    """

    def __init__(self, reason: str, bound: BoundKind, min_n: int | None = None):
        super().__init__(reason)
        self.reason = reason
        self.bound = bound
        self.min_n = min_n


@dataclass(frozen=True)
class PacParams:
    epsilon: float
    delta: float
    n: int

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))


@dataclass(frozen=True)
class Budget:
    """Admissible number of excluded validation examples.

    ``alpha`` is derived from the integer ``k_star`` so ``alpha * n == k_star``
    holds exactly.
    """

    k_star: int
    n: int
    bound_kind: BoundKind
    log_tail: float | None = None

    def __post_init__(self):
        if not 0 <= self.k_star <= self.n:
            raise ValueError(f"k_star={self.k_star} outside [0, {self.n}]")

    @property
    def alpha(self) -> Fraction:
        return Fraction(self.k_star, self.n)


def _check_tail_args(n: int, epsilon: float, k: int) -> None:
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    if int(k) != k or not 0 <= k <= n:
        raise ValueError(f"k must be an integer in [0, {n}], got {k}")


def _log_terms(n: int, epsilon: float):
    """Yield ``log(C(n, i) eps^i (1-eps)^(n-i))`` for i = 0, 1, ..., n.

    The binomial coefficient, ``eps^i`` and ``(1-eps)^(n-i)`` are all updated
    incrementally from the previous term.
    """
    log_eps = math.log(epsilon)
    log_one_minus = math.log1p(-epsilon)
    log_choose = 0.0
    for i in range(n + 1):
        if i > 0:
            log_choose += math.log(n - i + 1) - math.log(i)
        yield log_choose + i * log_eps + (n - i) * log_one_minus


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def log_binomial_tail(n: int, epsilon: float, k: int) -> float:
    """Natural log of ``sum_{i<=k} C(n,i) eps^i (1-eps)^(n-i)``."""
    _check_tail_args(n, epsilon, k)
    if epsilon == 1.0:
        # all mass sits at i = n
        return 0.0 if k == n else -math.inf
    acc = -math.inf
    for i, term in enumerate(_log_terms(n, epsilon)):
        acc = _logaddexp(acc, term)
        if i == k:
            break
    return min(acc, 0.0)


def binomial_tail(n: int, epsilon: float, k: int) -> float:
    """Lower binomial CDF ``P[Binomial(n, epsilon) <= k]``.

    >>> binomial_tail(2, 0.5, 0)
    0.25
    """
    return math.exp(log_binomial_tail(n, epsilon, k))


def direct_alpha(p: PacParams) -> Budget:
    """Largest ``k`` whose binomial tail is strictly below ``delta``.

    Enumerates ``k`` upward once, accumulating the tail as it goes, and stops
    at the first ``k`` where the constraint fails. Equality counts as failure.

    Raises
    ------
    Infeasible
        If even ``k = 0`` fails, i.e. ``(1 - epsilon)^n >= delta``.
    """
    log_delta = math.log(p.delta)
    acc = -math.inf
    k_star = -1
    best_tail = None
    for k, term in enumerate(_log_terms(p.n, p.epsilon)):
        acc = _logaddexp(acc, term)
        if not acc < log_delta:
            break
        k_star, best_tail = k, acc
    if k_star < 0:
        n_min = min_n_direct(p.epsilon, p.delta)
        raise Infeasible(
            f"(1 - epsilon)^n >= delta at n={p.n}, epsilon={p.epsilon}, "
            f"delta={p.delta}; direct bound needs n >= {n_min}",
            BoundKind.DIRECT,
            n_min,
        )
    return Budget(k_star=k_star, n=p.n, bound_kind=BoundKind.DIRECT, log_tail=best_tail)


def vc_slack(n: int, delta: float) -> float:
    """Uniform-convergence slack ``sqrt((log 2n + 1 - log(delta/4)) / n)``."""
    return math.sqrt((math.log(2 * n) + 1.0 - math.log(delta / 4.0)) / n)


def vc_alpha(p: PacParams) -> Budget:
    alpha_vc = p.epsilon - vc_slack(p.n, p.delta)
    if alpha_vc < 0:
        n_min = min_n_vc(p.epsilon, p.delta)
        raise Infeasible(
            f"VC slack {vc_slack(p.n, p.delta):.6g} exceeds epsilon={p.epsilon} "
            f"at n={p.n}; VC bound needs n >= {n_min}",
            BoundKind.VC,
            n_min,
        )
    k_star = min(math.floor(p.n * alpha_vc), p.n)
    return Budget(k_star=k_star, n=p.n, bound_kind=BoundKind.VC)


def _check_eps_delta(epsilon: float, delta: float) -> None:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def min_n_direct(epsilon: float, delta: float) -> int:
    """Smallest ``n`` with ``(1 - epsilon)^n < delta`` (the ``k = 0`` regime)."""
    _check_eps_delta(epsilon, delta)
    log_q = math.log1p(-epsilon)
    log_delta = math.log(delta)

    def ok(n: int) -> bool:
        return n * log_q < log_delta

    n = max(1, math.ceil(log_delta / log_q))
    while n > 1 and ok(n - 1):
        n -= 1
    while not ok(n):
        n += 1
    return n


def min_n_vc(epsilon: float, delta: float) -> int:
    """Smallest ``n`` at which the VC budget is nonnegative.

    The predicate ``epsilon >= vc_slack(n, delta)`` is false at ``n = 1`` and,
    once true, stays true (``n eps^2 - log 2n`` is convex in ``n``), so a
    doubling phase followed by bisection finds the boundary exactly.
    """
    _check_eps_delta(epsilon, delta)

    def ok(n: int) -> bool:
        return epsilon >= vc_slack(n, delta)

    lo, hi = 1, 2
    while not ok(hi):
        lo, hi = hi, hi * 2
        if hi > _MAX_N:
            raise OverflowError("minimal VC sample size exceeds 2**63 - 1")
    # invariant: not ok(lo), ok(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    assert ok(hi) and not ok(hi - 1)
    return hi

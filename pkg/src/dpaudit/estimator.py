"""Turning membership guesses into epsilon lower bounds.

Two estimators are provided:

* the one-run binomial test: under (eps, delta)-DP the number of correct
  guesses among ``r`` is stochastically dominated by
  ``Binomial(r, e^eps / (e^eps + 1))`` up to a delta correction;
* the Clopper-Pearson bound on false positive / false negative rates,
  plugged into the hypothesis-testing region of (eps, delta)-DP.

All binomial probabilities are exact sums of log-space pmf terms.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from dpaudit.errors import ConfigError

EPS_MAX = 20.0
EPS_TOL = 1e-3


def _log_pmf(r: int, p: float) -> np.ndarray:
    """log P[X = k] for k = 0..r, X ~ Binomial(r, p)."""
    k = np.arange(r + 1)
    if p == 0.0:
        return np.where(k == 0, 0.0, -np.inf)
    if p == 1.0:
        return np.where(k == r, 0.0, -np.inf)
    log_binom = gammaln(r + 1) - gammaln(k + 1) - gammaln(r - k + 1)
    return log_binom + k * math.log(p) + (r - k) * math.log1p(-p)


def _upper_tail(lp: np.ndarray, v: int) -> float:
    """Sum of ``exp(lp[v:])``, via the complement when the lower part is smaller.

    Summing whichever side holds less mass keeps full relative precision
    near both 0 and 1.
    """
    if v <= 0:
        return 1.0
    if v >= len(lp):
        return 0.0
    upper, lower = logsumexp(lp[v:]), logsumexp(lp[:v])
    if upper <= lower:
        return float(math.exp(upper))
    return float(-math.expm1(lower))


def binom_tail_ge(r: int, p: float, v: int) -> float:
    """P[X >= v] for X ~ Binomial(r, p)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    if r < 0 or not 0 <= v <= r + 1:
        raise ConfigError("need 0 <= v <= r + 1")
    if v == 0:
        return 1.0
    if v == r + 1:
        return 0.0
    return min(1.0, _upper_tail(_log_pmf(r, p), v))


def binom_cdf_le(k: int, n: int, p: float) -> float:
    """P[X <= k] for X ~ Binomial(n, p)."""
    if k < 0:
        return 0.0
    if k >= n:
        return 1.0
    return float(min(1.0, math.exp(logsumexp(_log_pmf(n, p)[: k + 1]))))


@dataclasses.dataclass(frozen=True)
class EstimatorQuery:
    v: int
    r: int
    m: int
    delta: float = 1e-5
    confidence: float = 0.95

    def __post_init__(self):
        if not 0 <= self.v <= self.r <= self.m:
            raise ConfigError(f"need 0 <= v <= r <= m, got v={self.v} r={self.r} m={self.m}")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError("delta must lie in [0, 1)")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError("confidence must lie in (0, 1)")


def pvalue_theorem1(q: EstimatorQuery, eps: float) -> float:
    """Probability of at least ``q.v`` correct guesses under (eps, delta)-DP.

    ``beta + alpha * m * delta`` with ``beta = P[W* >= v]`` and
    ``alpha = max_{1 <= i <= m} (2/i) P[v - i <= W* < v]``,
    ``W* ~ Binomial(r, e^eps / (1 + e^eps))``; clamped to 1.
    """
    if eps < 0:
        raise ConfigError("eps must be non-negative")
    v, r = q.v, q.r
    if v == 0:
        return 1.0
    p = float(expit(eps))
    lp = _log_pmf(r, p)
    beta = _upper_tail(lp, v)
    if q.delta == 0.0:
        return min(beta, 1.0)
    # P[v - i <= W < v] for i = 1..v; beyond i = v the window stops growing
    window = np.cumsum(np.exp(lp[:v][::-1]))
    i = np.arange(1, v + 1)
    alpha = float(np.max(2.0 * window / i))
    return min(beta + alpha * q.m * q.delta, 1.0)


def epsilon_lower_theorem1(q: EstimatorQuery, tol: float = EPS_TOL, eps_max: float = EPS_MAX) -> float:
    """Largest eps in ``[0, eps_max]`` rejected at level ``1 - confidence``.

    Bisection keeps ``lo`` rejected and ``hi`` not rejected, and returns
    ``lo``, so the answer errs on the conservative side by less than ``tol``.
    """
    threshold = 1.0 - q.confidence
    if pvalue_theorem1(q, 0.0) > threshold:
        return 0.0
    if pvalue_theorem1(q, eps_max) <= threshold:
        return eps_max
    lo, hi = 0.0, eps_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pvalue_theorem1(q, mid) <= threshold:
            lo = mid
        else:
            hi = mid
    return lo


def epsilon_optimal(m: int, delta: float = 1e-5, confidence: float = 0.95) -> float:
    """Bound attained when all ``m`` guesses are made and correct."""
    if m < 1:
        raise ConfigError("m must be positive")
    return epsilon_lower_theorem1(EstimatorQuery(m, m, m, delta, confidence))


def clopper_pearson_upper(k: int, n: int, confidence: float = 0.95) -> float:
    """One-sided upper confidence bound on a binomial proportion.

    Smallest ``p`` with ``P[Binomial(n, p) <= k] <= 1 - confidence``.
    """
    if not 0 <= k <= n:
        raise ConfigError("need 0 <= k <= n")
    if not 0.0 < confidence < 1.0:
        raise ConfigError("confidence must lie in (0, 1)")
    if k == n:
        return 1.0
    target = 1.0 - confidence
    lo, hi = k / n, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if binom_cdf_le(k, n, mid) <= target:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-15:
            break
    return hi


@dataclasses.dataclass(frozen=True)
class CPCounts:
    true_pos: int
    false_pos: int
    true_neg: int
    false_neg: int

    def __post_init__(self):
        if min(self.true_pos, self.false_pos, self.true_neg, self.false_neg) < 0:
            raise ConfigError("counts must be non-negative")

    @property
    def positives(self) -> int:
        return self.true_pos + self.false_neg

    @property
    def negatives(self) -> int:
        return self.true_neg + self.false_pos

    @classmethod
    def from_guesses(cls, S, guesses) -> CPCounts:
        """Counts over the non-abstaining guesses."""
        S, g = np.asarray(S), np.asarray(guesses)
        return cls(
            int(np.sum((g == 1) & (S == 1))),
            int(np.sum((g == 1) & (S == -1))),
            int(np.sum((g == -1) & (S == -1))),
            int(np.sum((g == -1) & (S == 1))),
        )


@dataclasses.dataclass(frozen=True)
class CPResult:
    epsilon: float
    fpr_upper: float
    fnr_upper: float
    degenerate: bool = False


def epsilon_lower_cp(counts: CPCounts, delta: float = 1e-5, confidence: float = 0.95) -> CPResult:
    """Epsilon lower bound from Clopper-Pearson upper bounds on both error rates.

    The error budget ``1 - confidence`` is split evenly between the two
    one-sided intervals.
    """
    if counts.positives == 0 or counts.negatives == 0:
        return CPResult(0.0, 1.0, 1.0, degenerate=True)
    each = 1.0 - (1.0 - confidence) / 2.0
    fpr = clopper_pearson_upper(counts.false_pos, counts.negatives, each)
    fnr = clopper_pearson_upper(counts.false_neg, counts.positives, each)
    candidates = [0.0]
    for num, den in ((1.0 - fpr - delta, fnr), (1.0 - fnr - delta, fpr)):
        if num > 0 and den > 0:
            candidates.append(math.log(num / den))
    return CPResult(max(candidates), fpr, fnr)


def auc(scores_members, scores_nonmembers) -> float:
    """Probability a member outscores a non-member, ties counted as 1/2."""
    pos = np.asarray(scores_members, dtype=np.float64).ravel()
    neg = np.asarray(scores_nonmembers, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ConfigError("both score lists must be non-empty")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    return float((below.sum() + 0.5 * (not_above - below).sum()) / (pos.size * neg.size))

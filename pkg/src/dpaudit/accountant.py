"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Integer orders only.  For an integer order ``a`` the moment
``E_{mu0}[(mu/mu0)^a]`` with ``mu = (1-q) mu0 + q mu1`` expands binomially to

    A_a = sum_k C(a, k) (1-q)^(a-k) q^k exp((k^2 - k) / (2 sigma^2))

which is summed in log space.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, logsumexp

from dpaudit.dp_train import PrivacyBudget
from dpaudit.errors import CalibrationError, ConfigError

ORDERS = np.arange(2, 65)
SIGMA_BRACKET = (1e-2, 1e3)


def _log_a_int(q: float, sigma: float, order: int) -> float:
    k = np.arange(order + 1)
    log_binom = gammaln(order + 1) - gammaln(k + 1) - gammaln(order - k + 1)
    terms = log_binom + k * math.log(q) + (k * k - k) / (2.0 * sigma**2)
    if q < 1.0:
        terms = terms + (order - k) * math.log1p(-q)
    else:
        terms = np.where(k == order, terms, -np.inf)
    return float(logsumexp(terms))


def rdp_subsampled_gaussian(q: float, sigma: float, orders=ORDERS) -> np.ndarray:
    """Per-step RDP at each integer order."""
    if not 0.0 < q <= 1.0:
        raise ConfigError("q must lie in (0, 1]")
    orders = np.atleast_1d(np.asarray(orders))
    if np.any(orders < 2) or np.any(orders != np.round(orders)):
        raise ConfigError("orders must be integers >= 2")
    if sigma <= 0:
        return np.full(orders.shape, np.inf)
    if q == 1.0:
        return orders / (2.0 * sigma**2)
    return np.array([_log_a_int(q, sigma, int(a)) / (a - 1) for a in orders])


def rdp_to_epsilon(rdp: np.ndarray, orders, delta: float) -> tuple[float, int]:
    """Convert composed RDP to (epsilon, best order)."""
    orders = np.asarray(orders, dtype=np.float64)
    eps = np.asarray(rdp) + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.nanargmin(eps))
    return float(eps[i]), int(orders[i])


def rdp_epsilon(sigma: float, q: float, steps: int, delta: float, orders=ORDERS) -> float:
    """Epsilon of ``steps`` compositions at fixed ``delta``; ``inf`` when sigma is 0."""
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    if sigma == 0:
        return math.inf
    if steps == 0:
        return 0.0
    rdp = rdp_subsampled_gaussian(q, sigma, orders) * steps
    return rdp_to_epsilon(rdp, orders, delta)[0]


def calibrate_sigma(
    target: PrivacyBudget,
    q: float,
    steps: int,
    tol: float = 1e-3,
    orders=ORDERS,
) -> float:
    """Smallest noise multiplier whose epsilon is within ``tol`` below the target.

    Raises:
      CalibrationError: if the target cannot be met inside ``SIGMA_BRACKET``.
    """
    if target.is_infinite or not target.epsilon > 0:
        raise ConfigError("calibration needs a finite, positive epsilon")

    def eps_of(s):
        return rdp_epsilon(s, q, steps, target.delta, orders)

    lo, hi = SIGMA_BRACKET
    if eps_of(hi) > target.epsilon:
        raise CalibrationError(
            f"epsilon={target.epsilon} unreachable with sigma <= {hi} "
            f"(q={q}, steps={steps}, delta={target.delta})"
        )
    if eps_of(lo) <= target.epsilon:
        return lo
    # invariant: eps_of(lo) > target >= eps_of(hi)
    while hi - lo > 1e-9 * hi or target.epsilon - eps_of(hi) >= tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if eps_of(mid) > target.epsilon:
            lo = mid
        else:
            hi = mid
    return hi

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpaudit import estimator
from dpaudit.errors import ConfigError
from dpaudit.estimator import CPCounts, EstimatorQuery


def tail_rational(r, p: Fraction, v):
    """P[Binomial(r, p) >= v] summed exactly."""
    return sum(math.comb(r, k) * p**k * (1 - p) ** (r - k) for k in range(v, r + 1))


RATIONAL_PS = [Fraction(1, 2), Fraction(1, 3), Fraction(9, 10), Fraction(1, 100), Fraction(731, 1000)]


@pytest.mark.parametrize("p", RATIONAL_PS)
def test_tail_matches_rational_oracle(p):
    for r in range(0, 51):
        for v in range(0, r + 2):
            exact = float(tail_rational(r, p, v))
            got = estimator.binom_tail_ge(r, float(p), v)
            assert got == pytest.approx(exact, rel=1e-12, abs=1e-300), (r, v)


@pytest.mark.parametrize("p,v", [(Fraction(1, 2), 1000), (Fraction(1, 2), 1100), (Fraction(7, 10), 1450), (Fraction(3, 4), 1400)])
def test_tail_large_r(p, v):
    exact = float(tail_rational(2000, p, v))
    assert estimator.binom_tail_ge(2000, float(p), v) == pytest.approx(exact, rel=1e-10)


def test_tail_edges():
    assert estimator.binom_tail_ge(10, 0.3, 0) == 1.0
    assert estimator.binom_tail_ge(10, 0.3, 11) == 0.0
    assert estimator.binom_tail_ge(10, 0.0, 1) == 0.0
    assert estimator.binom_tail_ge(10, 1.0, 10) == 1.0
    with pytest.raises(ConfigError):
        estimator.binom_tail_ge(10, 1.5, 3)


def test_cdf_complements_tail():
    for k in range(-1, 12):
        total = estimator.binom_cdf_le(k, 11, 0.37) + estimator.binom_tail_ge(11, 0.37, min(max(k + 1, 0), 12))
        assert total == pytest.approx(1.0, abs=1e-14)


def pvalue_rational(v, r, m, delta, p):
    """Independent evaluation of beta + alpha * m * delta with exact pmfs."""
    pmf = [math.comb(r, k) * p**k * (1 - p) ** (r - k) for k in range(r + 1)]
    beta = sum(pmf[v:])
    alpha = max(Fraction(2, i) * sum(pmf[max(v - i, 0):v]) for i in range(1, m + 1))
    return min(float(beta + alpha * m * Fraction(delta)), 1.0)


@pytest.mark.parametrize("v,r,m", [(8, 10, 12), (20, 30, 30), (5, 10, 10), (40, 50, 60)])
def test_pvalue_matches_rational_oracle(v, r, m):
    for eps in (0.0, 0.5, 1.3):
        p = Fraction(math.exp(eps) / (1 + math.exp(eps)))
        q = EstimatorQuery(v, r, m, delta=1e-3)
        assert estimator.pvalue_theorem1(q, eps) == pytest.approx(pvalue_rational(v, r, m, 1e-3, p), rel=1e-10)


def test_pvalue_without_delta_is_tail():
    q = EstimatorQuery(30, 40, 50, delta=0.0)
    p = math.exp(1.0) / (1 + math.exp(1.0))
    assert estimator.pvalue_theorem1(q, 1.0) == estimator.binom_tail_ge(40, p, 30)


def test_pvalue_no_correct_guesses():
    assert estimator.pvalue_theorem1(EstimatorQuery(0, 10, 10), 3.0) == 1.0


def test_pvalue_brackets_optimum_at_2000():
    q = EstimatorQuery(2000, 2000, 2000, 1e-5)
    # the optimum sits at 6.449, a hair under 6.45
    assert estimator.pvalue_theorem1(q, 6.44) < 0.05
    assert estimator.pvalue_theorem1(q, 6.60) > 0.05
    assert 6.44 <= estimator.epsilon_optimal(2000) <= 6.45


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.data())
def test_pvalue_monotone_in_eps(r, data):
    v = data.draw(st.integers(0, r))
    m = data.draw(st.integers(r, 3 * r))
    q = EstimatorQuery(v, r, m, 1e-5)
    ps = [estimator.pvalue_theorem1(q, e) for e in np.linspace(0, 10, 41)]
    assert all(a <= b + 1e-15 for a, b in zip(ps, ps[1:]))


def test_lower_bound_monotone_in_correct_count():
    eps = [estimator.epsilon_lower_theorem1(EstimatorQuery(v, 200, 400)) for v in range(100, 201, 5)]
    assert all(a <= b for a, b in zip(eps, eps[1:]))


def test_chance_level_gives_zero():
    assert estimator.epsilon_lower_theorem1(EstimatorQuery(1000, 2000, 2000)) == 0.0


@pytest.mark.parametrize("m,expected", [(2000, 6.45), (10_000, 7.83)])
def test_optimal_bound(m, expected):
    assert estimator.epsilon_optimal(m, 1e-5, 0.95) == pytest.approx(expected, abs=0.15)


def test_optimal_bound_increases_with_m():
    eps = [estimator.epsilon_optimal(m) for m in (100, 1000, 10_000)]
    assert eps[0] < eps[1] < eps[2]


@pytest.mark.parametrize("m", [10, 100, 1000, 5000])
def test_optimal_bound_closed_form_without_delta(m):
    p_star = 0.05 ** (1 / m)
    closed = math.log(p_star / (1 - p_star))
    got = estimator.epsilon_lower_theorem1(EstimatorQuery(m, m, m, delta=0.0))
    assert got == pytest.approx(closed, abs=1e-3)
    assert got <= closed


def test_query_validation():
    with pytest.raises(ConfigError):
        EstimatorQuery(5, 4, 10)
    with pytest.raises(ConfigError):
        EstimatorQuery(1, 4, 3)
    with pytest.raises(ConfigError):
        EstimatorQuery(1, 4, 10, confidence=1.0)


def test_cp_all_successes():
    assert estimator.clopper_pearson_upper(10, 10) == 1.0


def test_cp_zero_successes_closed_form():
    assert estimator.clopper_pearson_upper(0, 1000, 0.95) == pytest.approx(1 - 0.05 ** (1 / 1000), rel=1e-10)
    assert estimator.clopper_pearson_upper(0, 1000, 0.95) == pytest.approx(0.00299125, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.data())
def test_cp_defining_property(n, data):
    k = data.draw(st.integers(0, n - 1))
    p = estimator.clopper_pearson_upper(k, n, 0.95)
    assert 0.0499 <= estimator.binom_cdf_le(k, n, p) <= 0.0501


def test_cp_epsilon_all_correct():
    res = estimator.epsilon_lower_cp(CPCounts(1000, 0, 1000, 0), 1e-5, 0.95)
    assert res.epsilon == pytest.approx(5.6, abs=0.3)
    half = estimator.epsilon_lower_cp(CPCounts(500, 0, 500, 0), 1e-5, 0.95)
    assert half.epsilon < res.epsilon


def test_cp_epsilon_all_wrong():
    assert estimator.epsilon_lower_cp(CPCounts(0, 500, 0, 500)).epsilon == 0.0


def test_cp_symmetric_counts():
    res = estimator.epsilon_lower_cp(CPCounts(400, 100, 400, 100))
    assert res.fpr_upper == res.fnr_upper
    a = math.log((1 - res.fpr_upper - 1e-5) / res.fnr_upper)
    b = math.log((1 - res.fnr_upper - 1e-5) / res.fpr_upper)
    assert a == b == res.epsilon


def test_cp_degenerate_counts():
    res = estimator.epsilon_lower_cp(CPCounts(10, 0, 0, 0))
    assert res.degenerate and res.epsilon == 0.0


def test_cp_counts_from_guesses():
    S = np.array([1, 1, -1, -1, 1])
    g = np.array([1, -1, -1, 1, 0])
    assert CPCounts.from_guesses(S, g) == CPCounts(1, 1, 1, 1)


def auc_pairs(pos, neg):
    return sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (len(pos) * len(neg))


def test_auc_edges():
    assert estimator.auc([2, 3], [0, 1]) == 1.0
    assert estimator.auc([1, 1, 1], [1, 1]) == 0.5
    with pytest.raises(ConfigError):
        estimator.auc([], [1.0])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(-5, 5), min_size=1, max_size=30),
    st.lists(st.integers(-5, 5), min_size=1, max_size=30),
)
def test_auc_matches_pair_count(pos, neg):
    assert estimator.auc(pos, neg) == pytest.approx(auc_pairs(pos, neg), abs=1e-12)


def test_null_guesses_rarely_reject():
    rng = np.random.default_rng(99)
    m = 1000
    positives = 0
    for _ in range(200):
        S = 2 * rng.integers(0, 2, size=m) - 1
        guesses = 2 * rng.integers(0, 2, size=m) - 1
        W = int(np.sum(guesses == S))
        positives += estimator.epsilon_lower_theorem1(EstimatorQuery(W, m, m)) > 0
    assert positives / 200 <= 0.09

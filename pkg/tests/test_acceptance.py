"""Acceptance suite: one recorded pass/fail line per criterion.

The lines are printed inline (visible with ``-s``) and repeated in an
"acceptance criteria" section of the terminal summary.
"""
import math
import time
from fractions import Fraction

import numpy as np

from dpaudit import audit, canary, estimator, harness, nn
from dpaudit.estimator import CPCounts
from dpaudit.harness import ExperimentConfig

from conftest import DESK, gradient_check


def test_c01_optimal_bound(acceptance):
    got = {m: estimator.epsilon_optimal(m, 1e-5, 0.95) for m in (2000, 10_000)}
    ok = abs(got[2000] - 6.45) <= 0.15 and abs(got[10_000] - 7.83) <= 0.15
    assert acceptance(1, "eps_O reproduction", ok, f"eps_O(2000)={got[2000]:.3f} eps_O(10000)={got[10_000]:.3f}")


def test_c02_clopper_pearson(acceptance):
    # T = 1000 all-correct trials in each world, error budget split evenly
    res = estimator.epsilon_lower_cp(CPCounts(1000, 0, 1000, 0), 1e-5, 0.95)
    ok = abs(res.epsilon - 5.6) <= 0.3
    assert acceptance(2, "Clopper-Pearson reproduction", ok, f"eps_L={res.epsilon:.3f} (target 5.6 +- 0.3)")


def tail_rational(r, p, v):
    return sum(math.comb(r, k) * p**k * (1 - p) ** (r - k) for k in range(v, r + 1))


def test_c03_estimator_oracle(acceptance):
    worst_small = 0.0
    for p in (Fraction(1, 2), Fraction(1, 3), Fraction(9, 10), Fraction(1, 100), Fraction(731, 1000)):
        for r in range(51):
            for v in range(r + 2):
                exact = float(tail_rational(r, p, v))
                got = estimator.binom_tail_ge(r, float(p), v)
                err = 0.0 if got == exact else abs(got - exact) / max(abs(exact), 1e-300)
                worst_small = max(worst_small, err)
    worst_large = 0.0
    for p, v in [(Fraction(1, 2), 1000), (Fraction(1, 2), 1100), (Fraction(7, 10), 1450), (Fraction(3, 4), 1400)]:
        exact = float(tail_rational(2000, p, v))
        worst_large = max(worst_large, abs(estimator.binom_tail_ge(2000, float(p), v) - exact) / exact)
    # "exact" means agreement to double precision after rounding the oracle
    ok = worst_small <= 1e-12 and worst_large <= 1e-10
    assert acceptance(
        3, "estimator oracle equivalence", ok, f"max rel err r<=50: {worst_small:.1e}, r=2000: {worst_large:.1e}"
    )


def test_c04_gradients(acceptance):
    rng = np.random.default_rng(4)
    specs = [(nn.MAIN_LOSS, 0), (nn.LossSpec("tag"), 8), (nn.LossSpec("multitask", 0.7), 8)]
    worst = 0.0
    for i in range(50):
        spec, n_tags = specs[i % 3]
        dims = dict(d_x=int(rng.integers(2, 9)), d_h=int(rng.integers(2, 12)), n_classes=int(rng.integers(2, 7)))
        if n_tags:
            dims["h"] = int(rng.integers(1, n_tags))
        worst = max(worst, gradient_check(rng, spec, n_tags, **dims))
    assert acceptance(4, "gradient correctness", worst < 1e-4, f"max rel err over 50 configs: {worst:.2e}")


def test_c05_soundness(acceptance, honest_eps1_reports):
    eps = [r.eps_lower for r in honest_eps1_reports]
    frac = np.mean([e <= 1.0 for e in eps])
    ok = frac >= 0.95
    detail = f"eps_L <= 1 in {frac:.0%} of {len(eps)} seeds (max {max(eps):.3f}, sigma={honest_eps1_reports[0].sigma:.3f})"
    assert acceptance(5, "soundness at calibrated eps=1", ok, detail)


def test_c06_power(acceptance):
    t0 = time.perf_counter()
    row = harness.run_single(ExperimentConfig(m=1000, **DESK), 0)
    elapsed = time.perf_counter() - t0
    ok = row.eps_lower >= 0.8 * row.eps_optimal and elapsed < 300
    detail = f"eps_L={row.eps_lower:.3f} eps_O={row.eps_optimal:.3f} in {elapsed:.0f}s"
    assert acceptance(6, "power without noise", ok, detail)


def test_c07_fault_detection(acceptance, honest_eps1_reports):
    cfg = ExperimentConfig(m=1000, eps_target=1.0, seeds=tuple(range(10)), **DESK)
    faulty = harness.run_fault_demo(cfg, "no_noise")
    caught = np.mean([r.verdict == "VIOLATION" for r in faulty])
    passed = np.mean([r.verdict == "PASS" for r in honest_eps1_reports])
    ok = caught >= 0.9 and passed >= 0.95
    detail = f"no_noise flagged in {caught:.0%} of 10 seeds; none passes in {passed:.0%} of 20 seeds"
    assert acceptance(7, "fault detection", ok, detail)


def test_c08_self_comparison_superiority(acceptance):
    wins = []
    for seed in range(10):
        sc = harness.run_single(ExperimentConfig(flow="self_comp", m=512, sigma=0.0, **DESK), seed)
        bl = harness.run_single(ExperimentConfig(flow="baseline_o1", m=512, sigma=0.0, **DESK), seed)
        wins.append(sc.eps_lower >= bl.eps_lower)
    frac = np.mean(wins)
    assert acceptance(8, "self-comparison beats baseline", frac >= 0.8, f"self_comp >= baseline in {frac:.0%} of 10 seeds")


# Main-task-learnable toy data with m/n = 0.1; see the decisions ledger for the sizing.
CASE_II = dict(
    flow="multitask", canary_mode="in_distribution", m=100, n=1000, d_x=128, d_h=512, C=10, C_e=100, H=50,
    trigger_dim=32, lam=1.0, b=20.0, sigma=0.0, lr=0.5, clip=1.0, epochs=100.0, n_test=2000,
)


def test_c09_case_two_decoupling(acceptance):
    seeds = range(5)
    clean, multi, mis, aucs = [], [], [], []
    for seed in seeds:
        clean.append(harness.run_single(ExperimentConfig(**{**CASE_II, "m": 0}), seed).test_acc)
        row = harness.run_single(ExperimentConfig(**CASE_II), seed)
        multi.append(row.test_acc)
        aucs.append(row.auc)
        mislabeled = {**CASE_II, "flow": "baseline_o1", "canary_mode": "mislabeled"}
        mis.append(harness.run_single(ExperimentConfig(**mislabeled), seed).test_acc)
    drop_mt = float(np.mean(clean) - np.mean(multi))
    drop_mis = float(np.mean(clean) - np.mean(mis))
    ok = drop_mt <= 0.02 and min(aucs) > 0.95 and drop_mis > drop_mt
    detail = (
        f"mean test acc m=0 {np.mean(clean):.3f}, multitask drop {100 * drop_mt:.2f} pts, "
        f"mislabeled drop {100 * drop_mis:.2f} pts, min tag AUC {min(aucs):.3f}"
    )
    assert acceptance(9, "Case II decoupling", ok, detail)


def exact_collision(m, space):
    none = Fraction(1)
    for i in range(1, m):
        none *= Fraction(space - i, space)
    return 1 - none


def test_c10_birthday_bound(acceptance):
    s = canary.tag_collision_stats(100, 10**6, 1)
    exact = float(exact_collision(100, 10**6))
    rel = abs(s.approximation - exact) / exact
    argmax_ok = all(
        int(np.argmax([canary.tag_collision_stats(1, c, h).space for h in range(1, c + 1)])) + 1 == c // 2 for c in range(2, 31, 2)
    )
    ok = rel < 0.01 and argmax_ok
    detail = f"approx {s.approximation:.6f} vs exact {exact:.6f} (rel {rel:.2%}); argmax at C_e/2: {argmax_ok}"
    assert acceptance(10, "birthday bound", ok, detail)


def test_c11_null_calibration(acceptance):
    rng = np.random.default_rng(11)
    positives = 0
    for _ in range(200):
        S = audit.sample_membership(1000, rng)
        guesses = audit.mia_decide(rng.standard_normal(1000), 1000)
        positives += audit.compute_outcome(S, guesses).eps_lower > 0
    rate = positives / 200
    ok = abs(rate - 0.05) <= 0.04
    assert acceptance(11, "null calibration", ok, f"eps_L > 0 in {rate:.1%} of 200 null trials")

"""Experiment engine: configs, seeded runs, sweeps, fault demos, toy study.

Each run derives independent random streams for data, membership, model
initialization and training from ``SeedSequence([master_seed, seed])``, so a
(config, seed) pair fully determines its result row.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import itertools
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Iterable, Optional, Union

import numpy as np

from dpaudit import accountant, audit, canary, dp_train, estimator, nn
from dpaudit.errors import ConfigError
from dpaudit.report import CsvSink, ResultRow

log = logging.getLogger(__name__)

FLOWS = ("baseline_o1", "self_comp", "multitask", "toy")
CANARY_SOURCES = ("orthogonal", "gaussian", "mislabeled", "in_distribution")
FULL_SCALE = {"d_x": 1000, "d_h": 100_000, "C": 1000}


@dataclasses.dataclass
class ExperimentConfig:
    flow: str = "self_comp"
    canary_mode: str = "orthogonal"
    m: int = 512
    n: int = 0  # total training rows; 0 means n = m
    n_test: int = 1000
    d_x: int = 512
    d_h: int = 4096
    C: int = 256
    C_e: int = 100
    H: int = 50
    trigger_dim: int = 32
    lam: float = 1.0
    sigma0: float = 0.1
    a: int = 1
    b: float = 0.0
    eps_target: float = math.inf
    sigma: Optional[float] = None
    delta: float = 1e-5
    confidence: float = 0.95
    q: float = 0.1
    epochs: float = 100.0
    lr: float = 4.0
    clip: float = 1.0
    batch_mode: str = "poisson"
    fault: str = "none"
    r: Union[str, int, float] = "sign"
    estimator: str = "theorem1"
    seeds: tuple = (0,)
    master_seed: int = 0
    output: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.flow not in FLOWS:
            raise ConfigError(f"unknown flow {self.flow!r}; choose from {FLOWS}")
        if self.canary_mode not in CANARY_SOURCES:
            raise ConfigError(f"unknown canary_mode {self.canary_mode!r}; choose from {CANARY_SOURCES}")
        if self.flow != "multitask" and self.m < 1:
            raise ConfigError(f"{self.flow} needs m >= 1")
        if self.m < 0 or self.n < 0:
            raise ConfigError("m and n must be non-negative")
        if self.n and self.n < self.m:
            raise ConfigError("need n >= m")
        if min(self.d_x, self.d_h, self.C) < 1:
            raise ConfigError("d_x, d_h and C must be positive")
        if self.flow == "multitask" and not 1 <= self.H < self.C_e:
            raise ConfigError("multitask needs 1 <= H < C_e")
        if self.flow == "multitask" and self.trigger_dim > self.d_x:
            raise ConfigError("trigger_dim must not exceed d_x")
        if self.a not in (0, 1) or self.b < 0:
            raise ConfigError("need a in {0, 1} and b >= 0")
        if not 0.0 < self.delta < 1.0 or not 0.0 < self.confidence < 1.0:
            raise ConfigError("delta and confidence must lie in (0, 1)")
        if self.epochs < 0 or self.lr <= 0 or self.clip <= 0 or not 0 < self.q <= 1:
            raise ConfigError("need epochs >= 0, lr > 0, clip > 0, q in (0, 1]")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if not self.eps_target > 0:
            raise ConfigError("eps_target must be positive (inf for non-private)")
        if self.estimator not in audit.ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        dp_train.FaultMode.parse(self.fault)

    @property
    def n_total(self) -> int:
        return self.n or self.m

    @property
    def steps(self) -> int:
        return int(math.ceil(self.epochs / self.q))

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


@functools.lru_cache(maxsize=256)
def _calibrated_sigma(eps: float, delta: float, q: float, steps: int) -> float:
    return accountant.calibrate_sigma(dp_train.PrivacyBudget(eps, delta), q, steps)


def noise_multiplier(cfg: ExperimentConfig) -> float:
    """Explicit ``sigma`` wins; otherwise calibrate to ``eps_target`` (0 if infinite)."""
    if cfg.sigma is not None:
        return float(cfg.sigma)
    if math.isinf(cfg.eps_target) or cfg.steps == 0:
        return 0.0
    return _calibrated_sigma(cfg.eps_target, cfg.delta, cfg.q, cfg.steps)


@dataclasses.dataclass
class _Streams:
    data: np.random.Generator
    membership: np.random.Generator
    init: np.random.Generator
    train: np.random.Generator


def _streams(master_seed: int, seed: int) -> _Streams:
    children = np.random.SeedSequence([master_seed, seed]).spawn(4)
    return _Streams(*(np.random.default_rng(c) for c in children))


def make_train_fn(
    cfg: ExperimentConfig,
    streams: _Streams,
    sigma: float,
    n_tags: int = 0,
    fault: Optional[dp_train.FaultMode] = None,
) -> audit.TrainFn:
    """Trainer closure: fresh init, DP-SGD, query-only model."""
    train_cfg = dp_train.DPTrainConfig(
        clip_norm=cfg.clip,
        noise_multiplier=sigma,
        sampling_rate=cfg.q,
        steps=cfg.steps,
        learning_rate=cfg.lr,
        batch_mode=cfg.batch_mode,
        fault=fault or dp_train.FaultMode.parse(cfg.fault),
    )

    def train_fn(batch: nn.Batch, spec: nn.LossSpec) -> audit.QueryModel:
        params0 = nn.init_params(cfg.d_x, cfg.d_h, cfg.C, streams.init, n_tags=n_tags)
        params, _ = dp_train.train(params0, batch, train_cfg, spec, streams.train)
        return audit.QueryModel(params)

    return train_fn


def _flip_labels(labels: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random label different from the given one."""
    if n_classes < 2:
        return labels.copy()
    shift = rng.integers(1, n_classes, size=len(labels))
    return (labels + shift) % n_classes


def audit_canaries(cfg: ExperimentConfig, rng: np.random.Generator) -> canary.AuditDataset:
    """Canary set for Case I flows, including the real-data style baselines."""
    if cfg.canary_mode in canary.CANARY_MODES:
        return canary.gen_synthetic(cfg.m, cfg.d_x, cfg.C, cfg.canary_mode, cfg.sigma0, rng)
    toy = canary.gen_toy(cfg.m, cfg.d_x, cfg.C, cfg.a, cfg.b, cfg.sigma0, rng)
    labels = toy.labels
    if cfg.canary_mode == "mislabeled":
        labels = _flip_labels(labels, cfg.C, rng)
    ds = canary.AuditDataset(toy.features, labels, None, cfg.C, cfg.canary_mode, cfg.sigma0)
    ds.comp_labels = canary.gen_comp_labels(ds, rng)
    return ds


def _base_and_test(cfg: ExperimentConfig, rng: np.random.Generator):
    """Clean toy training rows and a held-out test set, drawn first.

    Drawing these before anything that depends on ``m`` keeps them identical
    across runs that differ only in the audit size, so utility comparisons
    against an ``m = 0`` run are paired.
    """
    base = canary.gen_toy(cfg.n_total, cfg.d_x, cfg.C, 1, cfg.b, cfg.sigma0, rng)
    test = canary.gen_toy(cfg.n_test, cfg.d_x, cfg.C, 1, cfg.b, cfg.sigma0, rng)
    return base, test


def _embed_canaries(cfg: ExperimentConfig, base: canary.ToyDataset, rng: np.random.Generator):
    """Pick ``m`` rows of ``base`` as canaries; the rest become always-in rows.

    ``mislabeled`` flips the chosen rows' labels, ``in_distribution`` keeps
    them, and synthetic modes swap in fresh synthetic canaries.
    """
    idx = rng.choice(len(base.labels), size=cfg.m, replace=False)
    keep = np.ones(len(base.labels), dtype=bool)
    keep[idx] = False
    x, y = base.features[idx], base.labels[idx]
    if cfg.canary_mode == "mislabeled":
        y = _flip_labels(y, cfg.C, rng)
    elif cfg.canary_mode in canary.CANARY_MODES:
        syn = canary.gen_synthetic(cfg.m, cfg.d_x, cfg.C, cfg.canary_mode, cfg.sigma0, rng)
        x, y = syn.features, syn.member_labels
    ds = canary.AuditDataset(x, y, None, cfg.C, cfg.canary_mode, cfg.sigma0)
    return ds, nn.Batch(base.features[keep], base.labels[keep])


def _decide(cfg: ExperimentConfig, scores: np.ndarray, policy=None) -> np.ndarray:
    policy = cfg.r if policy is None else policy
    r = min(audit.choose_r(scores, policy), len(scores))
    return audit.mia_decide(scores, r)


def run_single(cfg: ExperimentConfig, seed: int, fault: Optional[dp_train.FaultMode] = None) -> ResultRow:
    """One complete audit: data, training, scoring, guesses, estimate."""
    t0 = time.perf_counter()
    st = _streams(cfg.master_seed, seed)
    sigma = noise_multiplier(cfg)
    fault = fault or dp_train.FaultMode.parse(cfg.fault)
    train_acc = test_acc = float("nan")
    m = cfg.m

    if cfg.flow == "self_comp":
        ds = audit_canaries(cfg, st.data)
        S = audit.sample_membership(m, st.membership)
        scores, model = audit.run_self_comparison(ds, S, make_train_fn(cfg, st, sigma, fault=fault))
        train_acc = model.accuracy(ds.features, ds.member_labels)
        guesses = _decide(cfg, scores)

    elif cfg.flow == "toy":
        toy = canary.gen_toy(m, cfg.d_x, cfg.C, cfg.a, cfg.b, cfg.sigma0, st.data)
        S = audit.sample_membership(m, st.membership)
        scores, S, model = audit.run_baseline_o1(
            toy.features, toy.labels, S, make_train_fn(cfg, st, sigma, fault=fault), st.membership
        )
        train_acc = model.accuracy(toy.features[S == 1], toy.labels[S == 1])
        if np.any(S == -1):
            test_acc = model.accuracy(toy.features[S == -1], toy.labels[S == -1])
        guesses = _decide(cfg, scores, "all" if cfg.r == "sign" else None)

    elif cfg.flow == "baseline_o1":
        extra = None
        if cfg.n_total > m:
            # Case II: canaries replace m rows of an otherwise clean training set
            base, test = _base_and_test(cfg, st.data)
            ds, extra = _embed_canaries(cfg, base, st.data)
        else:
            ds = audit_canaries(cfg, st.data)
            test = canary.gen_toy(cfg.n_test, cfg.d_x, cfg.C, 1, cfg.b, cfg.sigma0, st.data)
        S = audit.sample_membership(m, st.membership)
        scores, S, model = audit.run_baseline_o1(
            ds.features, ds.member_labels, S, make_train_fn(cfg, st, sigma, fault=fault), st.membership, extra
        )
        test_acc = model.accuracy(test.features, test.labels)
        if extra is not None:
            train_acc = model.accuracy(extra.features, extra.labels)
        # a loss score has no natural zero, so "sign" falls back to guessing on all
        guesses = _decide(cfg, scores, "all" if cfg.r == "sign" else None)

    elif cfg.flow == "multitask":
        base, test = _base_and_test(cfg, st.data)
        mt = canary.build_multitask(
            cfg.n_total, m, cfg.d_x, cfg.C, cfg.C_e, cfg.H, cfg.trigger_dim, st.data,
            b=cfg.b, sigma0=cfg.sigma0, base=base,
        )
        S = audit.sample_membership(m, st.membership) if m else np.zeros(0, dtype=np.int64)
        scores, utility, _ = audit.run_multitask(
            mt, S, make_train_fn(cfg, st, sigma, n_tags=cfg.C_e, fault=fault), cfg.lam,
            nn.Batch(test.features, test.labels),
        )
        train_acc, test_acc = utility["train_acc"], utility["test_acc"]
        guesses = _decide(cfg, scores) if m else np.zeros(0, dtype=np.int64)

    else:  # pragma: no cover - validate() rejects this
        raise ConfigError(f"unknown flow {cfg.flow!r}")

    if m:
        out = audit.compute_outcome(
            S, guesses, cfg.delta, cfg.confidence, cfg.estimator, scores, cfg.flow, seed
        )
    else:
        out = audit.AuditOutcome(0, 0, 0, 0.0, 0.0, float("nan"), None, seed, cfg.flow)
    return ResultRow(
        run_id=run_id(cfg, seed),
        seed=seed,
        flow=cfg.flow,
        canary_mode=cfg.canary_mode,
        m=m,
        n=cfg.n_total,
        eps_target=cfg.eps_target,
        sigma=sigma,
        delta=cfg.delta,
        r=out.r,
        W=out.W,
        eps_lower=out.eps_lower,
        eps_optimal=out.eps_optimal,
        auc=out.auc,
        train_acc=train_acc,
        test_acc=test_acc,
        wall_seconds=time.perf_counter() - t0,
    )


_NOT_IN_ID = ("seeds", "output", "workers")


def config_digest(cfg: ExperimentConfig) -> str:
    """Short stable hash of every setting that affects a run's result."""
    items = sorted((k, v) for k, v in dataclasses.asdict(cfg).items() if k not in _NOT_IN_ID)
    return hashlib.sha1(repr(items).encode()).hexdigest()[:8]


def run_id(cfg: ExperimentConfig, seed: int) -> str:
    """Readable, unique id: headline settings, a config digest and the seed."""
    eps = "inf" if math.isinf(cfg.eps_target) else f"{cfg.eps_target:g}"
    parts = [cfg.flow, cfg.canary_mode, f"m{cfg.m}", f"n{cfg.n_total}", f"eps{eps}"]
    if cfg.fault != "none":
        parts.append(cfg.fault)
    return "-".join(parts + [config_digest(cfg), f"s{seed}"])


def failed_row(cfg: ExperimentConfig, seed: int, err: BaseException) -> ResultRow:
    nan = float("nan")
    return ResultRow(
        run_id(cfg, seed), seed, cfg.flow, cfg.canary_mode, cfg.m, cfg.n_total, cfg.eps_target,
        nan, cfg.delta, 0, 0, nan, nan, nan, nan, nan, 0.0,
        status=f"failed: {type(err).__name__}: {err}",
    )


def _run_job(args) -> ResultRow:
    cfg, seed = args
    try:
        return run_single(cfg, seed)
    except Exception as e:  # noqa: BLE001 - one bad seed must not sink a sweep
        log.error("run %s failed:\n%s", run_id(cfg, seed), traceback.format_exc())
        return failed_row(cfg, seed, e)


def run_jobs(jobs: Iterable[tuple[ExperimentConfig, int]], output=None, workers: int = 1) -> list[ResultRow]:
    """Run (config, seed) jobs; rows stream into ``output`` as they finish."""
    jobs = list(jobs)
    sink = CsvSink(output) if output else None
    rows = []

    def collect(row):
        rows.append(row)
        if sink is not None:
            sink.write(row)
        log.info("%s: eps_L=%.3f (eps_O=%.3f) %s", row.run_id, row.eps_lower, row.eps_optimal, row.status)

    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            collect(_run_job(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_job, job) for job in jobs]
            for fut in as_completed(futures):
                collect(fut.result())
        order = {run_id(c, s): i for i, (c, s) in enumerate(jobs)}
        rows.sort(key=lambda row: order.get(row.run_id, 0))
    return rows


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    """One row per seed in ``cfg.seeds``."""
    return run_jobs(((cfg, s) for s in cfg.seeds), cfg.output, cfg.workers)


def expand_grid(cfg: ExperimentConfig, grid: dict) -> list[ExperimentConfig]:
    """Cartesian product of ``grid`` values applied on top of ``cfg``."""
    if not grid:
        return [cfg]
    keys = list(grid)
    return [cfg.replace(**dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


def run_sweep(cfg: ExperimentConfig, grid: dict) -> list[ResultRow]:
    jobs = [(c, s) for c in expand_grid(cfg, grid) for s in c.seeds]
    return run_jobs(jobs, cfg.output, cfg.workers)


@dataclasses.dataclass
class FaultReport:
    seed: int
    fault: str
    claimed_eps: float
    sigma: float
    eps_lower: float
    eps_optimal: float
    verdict: str

    def line(self) -> str:
        return (
            f"seed={self.seed} fault={self.fault} claimed_eps={self.claimed_eps:g} "
            f"sigma={self.sigma:.4g} eps_L={self.eps_lower:.3f} eps_O={self.eps_optimal:.3f} "
            f"verdict={self.verdict}"
        )


def run_fault_demo(cfg: ExperimentConfig, fault: Union[str, dp_train.FaultMode]) -> list[FaultReport]:
    """Audit a trainer that claims ``cfg.eps_target`` but runs with ``fault``.

    One report per seed; the verdict is ``VIOLATION`` when the measured
    lower bound exceeds the claim.
    """
    if math.isinf(cfg.eps_target):
        raise ConfigError("fault demo needs a finite claimed eps_target")
    if isinstance(fault, str):
        fault = dp_train.FaultMode.parse(fault)
    cfg = cfg.replace(fault=str(fault))
    reports = []
    for row in run_jobs(((cfg, s) for s in cfg.seeds), cfg.output, cfg.workers):
        if row.status != "ok":
            raise RuntimeError(f"fault demo run {row.run_id} {row.status}")
        verdict = "VIOLATION" if row.eps_lower > cfg.eps_target else "PASS"
        reports.append(
            FaultReport(row.seed, str(fault), cfg.eps_target, row.sigma, row.eps_lower, row.eps_optimal, verdict)
        )
    return reports


TOY_DEFAULTS = dict(n=200, d=64, C=10, sigma0=0.1, epochs=100, lr=0.05, clip=1e3, d_h=512)


def run_toy_insight(grid: Iterable[tuple[int, float]], seeds=(0,), **overrides) -> list[dict]:
    """Non-private training on toy data for each (a, b); gap and member AUC.

    Returns one dict per (a, b, seed) with ``train_acc``, ``test_acc``,
    ``gap`` (train minus test accuracy) and ``auc`` of ``-loss`` between
    training and held-out samples.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("toy grid is empty")
    p = {**TOY_DEFAULTS, **overrides}
    out = []
    for (a, b), seed in itertools.product(grid, seeds):
        st = _streams(p.get("master_seed", 0), seed)
        train = canary.gen_toy(p["n"], p["d"], p["C"], a, b, p["sigma0"], st.data)
        test = canary.gen_toy(p["n"], p["d"], p["C"], a, b, p["sigma0"], st.data)
        train_cfg = dp_train.DPTrainConfig(
            clip_norm=p["clip"], noise_multiplier=0.0, sampling_rate=1.0,
            steps=int(p["epochs"]), learning_rate=p["lr"],
        )
        params0 = nn.init_params(p["d"], p["d_h"], p["C"], st.init)
        params, _ = dp_train.train(params0, nn.Batch(train.features, train.labels), train_cfg, rng=st.train)
        model = audit.QueryModel(params)
        tr = model.accuracy(train.features, train.labels)
        te = model.accuracy(test.features, test.labels)
        a_uc = estimator.auc(-model.loss(train.features, train.labels), -model.loss(test.features, test.labels))
        out.append(dict(a=a, b=b, seed=seed, train_acc=tr, test_acc=te, gap=tr - te, auc=a_uc))
    return out


def master_seed_from_env(default: int = 0) -> int:
    val = os.environ.get("DPAUDIT_SEED")
    if val is None or val == "":
        return default
    try:
        return int(val)
    except ValueError as e:
        raise ConfigError(f"DPAUDIT_SEED must be an integer, got {val!r}") from e

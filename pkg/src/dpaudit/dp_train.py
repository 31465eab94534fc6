"""DP-SGD with Poisson subsampling, per-example clipping and Gaussian noise.

Faults can be switched on to produce implementations that silently break
the privacy guarantee; each fault touches exactly one stage of the step.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import Optional

import numpy as np

from dpaudit import nn
from dpaudit.errors import ConfigError

log = logging.getLogger(__name__)

FAULT_KINDS = ("none", "no_noise", "under_noise", "no_per_sample_clip", "deterministic_batches")


@dataclasses.dataclass(frozen=True)
class FaultMode:
    kind: str = "none"
    factor: Optional[float] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault {self.kind!r}; choose from {FAULT_KINDS}")
        if self.kind == "under_noise":
            if self.factor is None or not 0.0 < self.factor < 1.0:
                raise ConfigError("under_noise needs a factor strictly between 0 and 1")
        elif self.factor is not None:
            raise ConfigError(f"fault {self.kind!r} takes no factor")

    @classmethod
    def parse(cls, text: str) -> FaultMode:
        """Parse ``"none"``, ``"no_noise"``, ``"under_noise:0.25"`` etc."""
        kind, _, factor = str(text).strip().partition(":")
        if factor:
            try:
                return cls(kind, float(factor))
            except ValueError as e:
                raise ConfigError(f"bad fault factor in {text!r}") from e
        return cls(kind)

    def __str__(self) -> str:
        return self.kind if self.factor is None else f"{self.kind}:{self.factor:g}"


NO_FAULT = FaultMode()


@dataclasses.dataclass(frozen=True)
class DPTrainConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    sampling_rate: float = 0.1
    steps: int = 1000
    learning_rate: float = 1e-3
    batch_mode: str = "poisson"
    fault: FaultMode = NO_FAULT
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if not self.noise_multiplier >= 0:
            raise ConfigError("noise_multiplier must be non-negative")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ConfigError("sampling_rate must lie in (0, 1]")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_mode not in ("poisson", "fixed_uniform"):
            raise ConfigError(f"unknown batch_mode {self.batch_mode!r}")
        if isinstance(self.fault, str):
            object.__setattr__(self, "fault", FaultMode.parse(self.fault))

    @property
    def effective_noise_multiplier(self) -> float:
        if self.fault.kind == "no_noise":
            return 0.0
        if self.fault.kind == "under_noise":
            return self.noise_multiplier * self.fault.factor
        return self.noise_multiplier


@dataclasses.dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if not (self.epsilon >= 0 or np.isinf(self.epsilon)):
            raise ConfigError("epsilon must be non-negative or infinite")

    @property
    def is_infinite(self) -> bool:
        return bool(np.isinf(self.epsilon))


@dataclasses.dataclass
class StepRecord:
    step: int
    batch_size: int
    mean_clipped_norm: float
    skipped: bool = False


def subsample(n: int, cfg: DPTrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Indices of the examples used in one step."""
    if n < 1:
        raise ConfigError("cannot subsample an empty dataset")
    size = int(np.floor(cfg.sampling_rate * n))
    if cfg.fault.kind == "deterministic_batches":
        return np.arange(max(size, 1))
    if cfg.batch_mode == "fixed_uniform":
        return np.sort(rng.choice(n, size=max(size, 1), replace=False))
    if cfg.sampling_rate == 1.0:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < cfg.sampling_rate)


def clip_factors(norms: np.ndarray, clip_norm: float) -> np.ndarray:
    """Per-example scale ``min(R / ||g||, 1)``; zero gradients keep scale 1."""
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, np.where(norms > 0, clip_norm / norms, 1.0))


def clip_per_sample(grad_sets, clip_norm: float) -> list[tuple[np.ndarray, ...]]:
    """Scale each example's gradient set to flattened L2 norm at most ``clip_norm``."""
    if not clip_norm > 0:
        raise ConfigError("clip_norm must be positive")
    out = []
    for g in grad_sets:
        c = clip_factors(np.array([nn.flat_norm(g)]), clip_norm)[0]
        out.append(tuple(b * c for b in g))
    return out


def noisy_gradient(
    params: nn.ModelParams,
    batch: nn.Batch,
    cfg: DPTrainConfig,
    rng: np.random.Generator,
    spec: nn.LossSpec = nn.MAIN_LOSS,
) -> tuple[tuple[np.ndarray, ...], float]:
    """Privatized mean gradient of ``batch`` and the mean clipped norm."""
    B = len(batch)
    grads = nn.grad_factors(params, batch, spec)
    norms = grads.norms()
    if cfg.fault.kind == "no_per_sample_clip":
        mean = grads.weighted_sum(np.full(B, 1.0 / B))
        scale = clip_factors(np.array([nn.flat_norm(mean)]), cfg.clip_norm)[0]
        clipped_mean = tuple(b * scale for b in mean)
        mean_norm = float(np.mean(norms))
    else:
        c = clip_factors(norms, cfg.clip_norm)
        clipped_mean = grads.weighted_sum(c / B)
        mean_norm = float(np.mean(norms * c))

    sigma = cfg.effective_noise_multiplier
    if sigma == 0.0:
        return clipped_mean, mean_norm
    std = sigma * cfg.clip_norm / B
    return tuple(b + std * rng.standard_normal(b.shape) for b in clipped_mean), mean_norm


def dp_sgd_step(
    params: nn.ModelParams,
    data: nn.Batch,
    cfg: DPTrainConfig,
    rng: np.random.Generator,
    spec: nn.LossSpec = nn.MAIN_LOSS,
    step: int = 0,
) -> tuple[nn.ModelParams, StepRecord]:
    """One DP-SGD update; an empty sampled batch leaves ``params`` untouched."""
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    idx = subsample(len(data), cfg, rng)
    if len(idx) == 0:
        return params, StepRecord(step, 0, 0.0, skipped=True)
    grad, mean_norm = noisy_gradient(params, data.subset(idx), cfg, rng, spec)
    new = params.replace_blocks(p - cfg.learning_rate * g for p, g in zip(params.blocks(), grad))
    return new, StepRecord(step, len(idx), mean_norm)


def train(
    params0: nn.ModelParams,
    data: nn.Batch,
    cfg: DPTrainConfig,
    spec: nn.LossSpec = nn.MAIN_LOSS,
    rng: Optional[np.random.Generator] = None,
) -> tuple[nn.ModelParams, list[StepRecord]]:
    """Run ``cfg.steps`` DP-SGD steps.

    The step log is for diagnostics only; it must not be handed to an
    auditor, which sees the final model through queries alone.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    params = params0
    steplog = []
    for t in range(cfg.steps):
        params, rec = dp_sgd_step(params, data, cfg, rng, spec, step=t)
        steplog.append(rec)
    skipped = sum(r.skipped for r in steplog)
    if skipped:
        log.debug("%d of %d steps sampled an empty batch", skipped, cfg.steps)
    return params, steplog

"""One-run auditing games.

The trainer is an opaque callable ``train_fn(batch, loss_spec)`` returning a
:class:`QueryModel`; auditing code only ever issues loss queries against the
final model.  Three games are implemented:

* baseline: random include/exclude by ``S``, score ``-loss``;
* self-comparison: train on every canary, score each one by the loss gap
  between its true label and an independent comparison label, with the
  roles swapped according to ``S``;
* multi-task: the same self-comparison, applied to the tag head of a model
  trained jointly on a main task and a membership-encoding task.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Optional, Union

import numpy as np

from dpaudit import estimator, nn
from dpaudit.canary import AuditDataset, MultiTaskDataset
from dpaudit.errors import ConfigError

log = logging.getLogger(__name__)

FLOWS = ("baseline_o1", "self_comp", "multitask")
ESTIMATORS = ("theorem1", "cp")


class QueryModel:
    """Query-only view of a trained model."""

    def __init__(self, params: nn.ModelParams):
        self._params = params

    def loss(self, features, labels) -> np.ndarray:
        logits, _ = nn.forward(self._params, features)
        return nn.cross_entropy(logits, labels)

    def tag_loss(self, features, tag_sets) -> np.ndarray:
        _, hidden = nn.forward(self._params, features)
        return nn.tag_set_loss(nn.tag_forward(self._params, hidden), tag_sets)

    def predict(self, features) -> np.ndarray:
        return nn.predict(self._params, features)

    def accuracy(self, features, labels) -> float:
        return nn.accuracy(self._params, features, labels)


TrainFn = Callable[[nn.Batch, nn.LossSpec], QueryModel]


def sample_membership(m: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform signs."""
    if m < 1:
        raise ConfigError("m must be positive")
    return 2 * rng.integers(0, 2, size=m) - 1


def mia_decide(scores, r: int) -> np.ndarray:
    """Guess +1 for the r/2 highest scores and -1 for the r/2 lowest.

    Odd ``r`` is rounded down.  Ties go by index: among equal scores the
    lowest indices are ranked highest.
    """
    scores = np.asarray(scores, dtype=np.float64)
    m = len(scores)
    if r > m:
        raise ConfigError(f"cannot make r={r} guesses on {m} scores")
    if r < 0:
        raise ConfigError("r must be non-negative")
    half = r // 2
    order = np.argsort(-scores, kind="stable")
    guesses = np.zeros(m, dtype=np.int64)
    guesses[order[:half]] = 1
    if half:
        guesses[order[m - half:]] = -1
    return guesses


def choose_r(scores, policy: Union[str, int, float]) -> int:
    """Number of guesses from the scores alone.

    ``"all"`` guesses on every sample.  ``"sign"`` uses the natural zero of
    self-comparison scores: ``2 * min(#positive, #negative)``, so that the
    top half lands on positive scores and the bottom half on negative ones.
    An int is taken literally; a float in (0, 1] is a fraction of ``m``.
    """
    scores = np.asarray(scores)
    m = len(scores)
    if policy == "all":
        return m
    if policy == "sign":
        return 2 * int(min(np.sum(scores > 0), np.sum(scores < 0)))
    if isinstance(policy, (int, np.integer)) and not isinstance(policy, bool):
        return int(policy)
    if isinstance(policy, float) and 0.0 < policy <= 1.0:
        return int(policy * m)
    raise ConfigError(f"unknown r policy {policy!r}")


@dataclasses.dataclass
class AuditOutcome:
    W: int
    r: int
    m: int
    eps_lower: float
    eps_optimal: float
    auc: float = float("nan")
    utility: Optional[dict] = None
    seed: Optional[int] = None
    flow: str = "self_comp"
    estimator: str = "theorem1"
    guesses: Optional[np.ndarray] = dataclasses.field(default=None, repr=False)


def count_correct(S, guesses) -> int:
    return int(np.sum(np.maximum(0, np.asarray(guesses) * np.asarray(S))))


def score_auc(scores, S) -> float:
    scores, S = np.asarray(scores), np.asarray(S)
    if not (np.any(S == 1) and np.any(S == -1)):
        return float("nan")
    return estimator.auc(scores[S == 1], scores[S == -1])


def compute_outcome(
    S,
    guesses,
    delta: float = 1e-5,
    confidence: float = 0.95,
    estimator_choice: str = "theorem1",
    scores=None,
    flow: str = "self_comp",
    seed: Optional[int] = None,
) -> AuditOutcome:
    S = np.asarray(S)
    guesses = np.asarray(guesses)
    if S.shape != guesses.shape:
        raise ConfigError("S and guesses must have the same length")
    m = len(S)
    r = int(np.count_nonzero(guesses))
    W = count_correct(S, guesses)
    eps_opt = estimator.epsilon_optimal(m, delta, confidence)
    if estimator_choice == "theorem1":
        eps_l = estimator.epsilon_lower_theorem1(estimator.EstimatorQuery(W, r, m, delta, confidence))
    elif estimator_choice == "cp":
        res = estimator.epsilon_lower_cp(estimator.CPCounts.from_guesses(S, guesses), delta, confidence)
        eps_l = res.epsilon
    else:
        raise ConfigError(f"unknown estimator {estimator_choice!r}; choose from {ESTIMATORS}")
    a = float("nan") if scores is None else score_auc(scores, S)
    return AuditOutcome(W, r, m, eps_l, eps_opt, a, None, seed, flow, estimator_choice, guesses)


def run_baseline_o1(
    features,
    labels,
    S,
    train_fn: TrainFn,
    rng: Optional[np.random.Generator] = None,
    extra: Optional[nn.Batch] = None,
) -> tuple[np.ndarray, np.ndarray, QueryModel]:
    """Include canary ``i`` in training iff ``S[i] == +1``; score by ``-loss``.

    ``extra`` rows (non-audit data) are always trained on.  If ``S`` excludes
    every canary and there is nothing else to train on, ``S`` is redrawn
    from ``rng``.  Returns ``(scores, S, model)``; ``S`` is the vector that
    was actually used.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    S = np.asarray(S)
    if len(features) != len(S) or len(labels) != len(S):
        raise ConfigError("features, labels and S must have m rows")
    while not np.any(S == 1) and extra is None:
        if rng is None:
            raise ConfigError("S excludes every canary and no rng was given to redraw it")
        log.info("membership draw excluded all %d canaries; redrawing", len(S))
        S = sample_membership(len(S), rng)
    inc = S == 1
    x_in, y_in = features[inc], labels[inc]
    if extra is not None:
        x_in = np.concatenate([x_in, extra.features])
        y_in = np.concatenate([y_in, extra.labels])
    model = train_fn(nn.Batch(x_in, y_in), nn.MAIN_LOSS)
    return -model.loss(features, labels), S, model


def self_comparison_scores(model: QueryModel, features, member_labels, comp_labels, S) -> np.ndarray:
    """``S * (loss(comparison) - loss(member))``, elementwise."""
    gap = model.loss(features, comp_labels) - model.loss(features, member_labels)
    return np.asarray(S) * gap


def run_self_comparison(
    audit_ds: AuditDataset, S, train_fn: TrainFn
) -> tuple[np.ndarray, QueryModel]:
    """Train on every canary, then score each against its comparison label."""
    if audit_ds.comp_labels is None:
        raise ConfigError("self-comparison needs comparison labels")
    S = np.asarray(S)
    if len(S) != audit_ds.m:
        raise ConfigError("S must have one entry per canary")
    model = train_fn(nn.Batch(audit_ds.features, audit_ds.member_labels), nn.MAIN_LOSS)
    scores = self_comparison_scores(
        model, audit_ds.features, audit_ds.member_labels, audit_ds.comp_labels, S
    )
    return scores, model


def multitask_scores(model: QueryModel, mt_ds: MultiTaskDataset, S) -> np.ndarray:
    x = mt_ds.features[mt_ds.audit_idx]
    gap = model.tag_loss(x, mt_ds.comp_tags) - model.tag_loss(x, mt_ds.member_tags)
    return np.asarray(S) * gap


def run_multitask(
    mt_ds: MultiTaskDataset,
    S,
    train_fn: TrainFn,
    lam: float = 1.0,
    test: Optional[nn.Batch] = None,
) -> tuple[np.ndarray, dict, QueryModel]:
    """Joint main/tag training, then self-comparison on the tag loss.

    Returns ``(scores, utility, model)``; ``utility`` holds train and, given
    ``test``, held-out main-task accuracy.
    """
    S = np.asarray(S)
    if len(S) != mt_ds.m:
        raise ConfigError("S must have one entry per audit row")
    batch = nn.Batch(mt_ds.features, mt_ds.labels, mt_ds.full_tags(), mt_ds.member)
    model = train_fn(batch, nn.LossSpec("multitask", lam))
    scores = multitask_scores(model, mt_ds, S) if mt_ds.m else np.zeros(0)
    utility = {"train_acc": model.accuracy(mt_ds.features, mt_ds.labels)}
    if test is not None:
        utility["test_acc"] = model.accuracy(test.features, test.labels)
    return scores, utility, model

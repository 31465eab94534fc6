"""Two-layer ReLU network with exact per-example gradients.

The network is ``logits = relu(x @ W1 + b1) @ W2 + b2`` with an optional
linear tag head on the hidden layer for multi-task training.  Everything is
float64 numpy.

Per-example gradients of a dense layer are outer products, so they are kept
in factored form (:class:`PerSampleGrads`) and only materialized on request.
Norms and clipped sums are computed from the factors without ever building a
``B x d_x x d_h`` tensor.
"""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from dpaudit.errors import ConfigError, NumericError


@dataclasses.dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    tag_W: Optional[np.ndarray] = None
    tag_b: Optional[np.ndarray] = None

    def __post_init__(self):
        d_x, d_h = self.W1.shape
        if self.b1.shape != (d_h,) or self.W2.shape[0] != d_h:
            raise ConfigError("hidden dimensions of W1, b1, W2 disagree")
        if self.b2.shape != (self.W2.shape[1],):
            raise ConfigError("b2 does not match the number of classes")
        if (self.tag_W is None) != (self.tag_b is None):
            raise ConfigError("tag head needs both weights and bias")
        if self.tag_W is not None:
            if self.tag_W.shape[0] != d_h or self.tag_b.shape != (self.tag_W.shape[1],):
                raise ConfigError("tag head does not match the hidden layer")

    @property
    def d_x(self) -> int:
        return self.W1.shape[0]

    @property
    def d_h(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]

    @property
    def n_tags(self) -> int:
        return 0 if self.tag_W is None else self.tag_W.shape[1]

    @property
    def has_tag_head(self) -> bool:
        return self.tag_W is not None

    def blocks(self) -> tuple[np.ndarray, ...]:
        """Parameter arrays in canonical order (main blocks, then tag head)."""
        out = (self.W1, self.b1, self.W2, self.b2)
        if self.tag_W is not None:
            out += (self.tag_W, self.tag_b)
        return out

    def replace_blocks(self, blocks) -> ModelParams:
        blocks = tuple(blocks)
        if len(blocks) != len(self.blocks()):
            raise ConfigError("wrong number of parameter blocks")
        return ModelParams(*blocks)

    def copy(self) -> ModelParams:
        return self.replace_blocks(b.copy() for b in self.blocks())

    def num_params(self) -> int:
        return sum(b.size for b in self.blocks())


def init_params(
    d_x: int,
    d_h: int,
    n_classes: int,
    rng: np.random.Generator,
    n_tags: int = 0,
) -> ModelParams:
    """He-normal first layer, 1/sqrt(fan_in) heads, zero biases."""
    W1 = rng.standard_normal((d_x, d_h)) * np.sqrt(2.0 / d_x)
    W2 = rng.standard_normal((d_h, n_classes)) / np.sqrt(d_h)
    tag_W = tag_b = None
    if n_tags:
        tag_W = rng.standard_normal((d_h, n_tags)) / np.sqrt(d_h)
        tag_b = np.zeros(n_tags)
    return ModelParams(W1, np.zeros(d_h), W2, np.zeros(n_classes), tag_W, tag_b)


@dataclasses.dataclass
class Batch:
    """Examples fed to the trainer.

    ``tags`` holds one row of ``H`` distinct tag indices per example (rows
    without a tag are ignored by the tag loss through ``member``).
    ``member`` holds the 0/1 flags that switch the tag loss on.
    """

    features: np.ndarray
    labels: np.ndarray
    tags: Optional[np.ndarray] = None
    member: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (len(self.features),):
            raise ConfigError("features must be (B, d) with one label per row")
        if self.tags is not None:
            self.tags = np.asarray(self.tags, dtype=np.int64)
            if self.tags.ndim != 2 or len(self.tags) != len(self.features):
                raise ConfigError("tags must be (B, H)")
        if self.member is not None:
            self.member = np.asarray(self.member, dtype=np.int64)
            if self.member.shape != self.labels.shape:
                raise ConfigError("member flags must have one entry per row")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Batch:
        return Batch(
            self.features[idx],
            self.labels[idx],
            None if self.tags is None else self.tags[idx],
            None if self.member is None else self.member[idx],
        )


@dataclasses.dataclass(frozen=True)
class LossSpec:
    """Which objective to differentiate.

    ``main``: cross-entropy on the class labels.
    ``tag``: multi-label tag loss on rows with ``member == 1``.
    ``multitask``: main + lam * tag, the tag term gated by ``member == 1``.
    """

    kind: str = "main"
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in ("main", "tag", "multitask"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")

    @property
    def uses_tags(self) -> bool:
        return self.kind == "tag" or (self.kind == "multitask" and self.lam > 0)


MAIN_LOSS = LossSpec("main")


def _check_features(params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.d_x:
        raise ConfigError(
            f"expected features of shape (B, {params.d_x}), got {features.shape}"
        )
    return features


def forward(params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, hidden)`` for a batch of feature rows."""
    features = _check_features(params, features)
    hidden = np.maximum(features @ params.W1 + params.b1, 0.0)
    return hidden @ params.W2 + params.b2, hidden


def tag_forward(params: ModelParams, hidden: np.ndarray) -> np.ndarray:
    if not params.has_tag_head:
        raise ConfigError("model has no tag head")
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[1] != params.d_h:
        raise ConfigError(f"expected hidden of shape (B, {params.d_h})")
    return hidden @ params.tag_W + params.tag_b


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_rows,):
        raise ConfigError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample ``-log softmax(logits)[label]``."""
    logp = log_softmax(logits)
    labels = _check_labels(labels, logp.shape[0], logp.shape[1])
    return -logp[np.arange(len(labels)), labels]


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def tags_to_multihot(tags: np.ndarray, n_tags: int) -> np.ndarray:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.size and (tags.min() < 0 or tags.max() >= n_tags):
        raise ConfigError(f"tags must lie in [0, {n_tags})")
    target = np.zeros((len(tags), n_tags))
    np.put_along_axis(target, tags, 1.0, axis=1)
    return target


def tag_bce(tag_logits: np.ndarray, tags: np.ndarray) -> np.ndarray:
    """Per-sample binary cross-entropy against an H-hot target."""
    tag_logits = np.asarray(tag_logits, dtype=np.float64)
    if not np.all(np.isfinite(tag_logits)):
        raise NumericError("non-finite tag logits")
    target = tags_to_multihot(tags, tag_logits.shape[1])
    return -(target * _log_sigmoid(tag_logits) + (1 - target) * _log_sigmoid(-tag_logits)).sum(
        axis=1
    )


def tag_set_loss(tag_logits: np.ndarray, tags: np.ndarray) -> np.ndarray:
    """Negative summed log-probability of the H coordinates in each tag set."""
    tag_logits = np.asarray(tag_logits, dtype=np.float64)
    if not np.all(np.isfinite(tag_logits)):
        raise NumericError("non-finite tag logits")
    picked = np.take_along_axis(tag_logits, np.asarray(tags, dtype=np.int64), axis=1)
    return -_log_sigmoid(picked).sum(axis=1)


@dataclasses.dataclass
class PerSampleGrads:
    """Per-example gradients stored as outer-product factors.

    Example ``i`` has ``dW1 = outer(inputs[i], d_pre[i])``, ``db1 = d_pre[i]``,
    ``dW2 = outer(hidden[i], d_logits[i])``, ``db2 = d_logits[i]`` and, with a
    tag head, ``dtag_W = outer(hidden[i], d_tag[i])``, ``dtag_b = d_tag[i]``.
    """

    inputs: np.ndarray
    d_pre: np.ndarray
    hidden: np.ndarray
    d_logits: np.ndarray
    d_tag: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.inputs)

    def sq_norms(self) -> np.ndarray:
        """Squared L2 norm of each example's flattened gradient."""
        x2 = np.einsum("ij,ij->i", self.inputs, self.inputs)
        h2 = np.einsum("ij,ij->i", self.hidden, self.hidden)
        p2 = np.einsum("ij,ij->i", self.d_pre, self.d_pre)
        o2 = np.einsum("ij,ij->i", self.d_logits, self.d_logits)
        total = (x2 + 1.0) * p2 + (h2 + 1.0) * o2
        if self.d_tag is not None:
            total = total + (h2 + 1.0) * np.einsum("ij,ij->i", self.d_tag, self.d_tag)
        return total

    def norms(self) -> np.ndarray:
        return np.sqrt(self.sq_norms())

    def weighted_sum(self, weights) -> tuple[np.ndarray, ...]:
        """``sum_i weights[i] * g_i`` in block order."""
        w = np.asarray(weights, dtype=np.float64)[:, None]
        wp, wo = w * self.d_pre, w * self.d_logits
        out = (self.inputs.T @ wp, wp.sum(0), self.hidden.T @ wo, wo.sum(0))
        if self.d_tag is not None:
            wt = w * self.d_tag
            out += (self.hidden.T @ wt, wt.sum(0))
        return out

    def example(self, i: int) -> tuple[np.ndarray, ...]:
        out = (
            np.outer(self.inputs[i], self.d_pre[i]),
            self.d_pre[i].copy(),
            np.outer(self.hidden[i], self.d_logits[i]),
            self.d_logits[i].copy(),
        )
        if self.d_tag is not None:
            out += (np.outer(self.hidden[i], self.d_tag[i]), self.d_tag[i].copy())
        return out

    def materialize(self) -> list[tuple[np.ndarray, ...]]:
        return [self.example(i) for i in range(len(self))]


def _tag_gate(batch: Batch, spec: LossSpec) -> np.ndarray:
    if batch.tags is None:
        raise ConfigError("tag loss requested but batch has no tags")
    if batch.member is None:
        return np.ones(len(batch))
    return (batch.member == 1).astype(np.float64)


def per_sample_losses(params: ModelParams, batch: Batch, spec: LossSpec = MAIN_LOSS) -> np.ndarray:
    """Per-example value of the objective selected by ``spec``."""
    logits, hidden = forward(params, batch.features)
    if spec.kind == "main":
        return cross_entropy(logits, batch.labels)
    if not params.has_tag_head:
        raise ConfigError("tag loss requested without a tag head")
    gate = _tag_gate(batch, spec)
    tag_loss = np.where(gate > 0, tag_bce(tag_forward(params, hidden), batch.tags), 0.0)
    if spec.kind == "tag":
        return tag_loss
    return cross_entropy(logits, batch.labels) + spec.lam * tag_loss


def grad_factors(params: ModelParams, batch: Batch, spec: LossSpec = MAIN_LOSS) -> PerSampleGrads:
    """Per-example gradients of the objective selected by ``spec``."""
    x = _check_features(params, batch.features)
    pre = x @ params.W1 + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.W2 + params.b2
    labels = _check_labels(batch.labels, len(x), params.n_classes)

    if spec.kind == "tag":
        d_logits = np.zeros_like(logits)
    else:
        d_logits = softmax(logits)
        d_logits[np.arange(len(labels)), labels] -= 1.0

    d_tag = None
    if spec.kind != "main":
        if not params.has_tag_head:
            raise ConfigError("tag loss requested without a tag head")
        gate = _tag_gate(batch, spec)
        coef = gate if spec.kind == "tag" else spec.lam * gate
        tag_logits = hidden @ params.tag_W + params.tag_b
        if not np.all(np.isfinite(tag_logits)):
            raise NumericError("non-finite tag logits")
        target = tags_to_multihot(batch.tags, params.n_tags)
        d_tag = coef[:, None] * (0.5 * (1.0 + np.tanh(0.5 * tag_logits)) - target)
    elif params.has_tag_head:
        d_tag = np.zeros((len(x), params.n_tags))

    d_hidden = d_logits @ params.W2.T
    if d_tag is not None:
        d_hidden += d_tag @ params.tag_W.T
    d_pre = d_hidden * (pre > 0)
    return PerSampleGrads(x, d_pre, hidden, d_logits, d_tag)


def per_sample_grads(
    params: ModelParams, batch: Batch, spec: LossSpec = MAIN_LOSS
) -> list[tuple[np.ndarray, ...]]:
    """One gradient set per example, each aligned with ``params.blocks()``."""
    return grad_factors(params, batch, spec).materialize()


def mean_loss_grad(
    params: ModelParams, batch: Batch, spec: LossSpec = MAIN_LOSS
) -> tuple[float, tuple[np.ndarray, ...]]:
    """Mean loss over the batch and its gradient."""
    loss = per_sample_losses(params, batch, spec).mean()
    g = grad_factors(params, batch, spec)
    return float(loss), g.weighted_sum(np.full(len(g), 1.0 / len(g)))


def flat_norm(blocks) -> float:
    return float(np.sqrt(sum(np.vdot(b, b) for b in blocks)))


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return forward(params, features)[0].argmax(axis=1)


def accuracy(params: ModelParams, features: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(predict(params, features) == labels))

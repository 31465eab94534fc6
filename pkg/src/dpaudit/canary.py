"""Audit dataset construction.

Synthetic uncorrelated canaries, comparison labels, the trigger/tag
multi-task dataset, tag collision statistics and the toy data law
``x = a * N(y, s0^2) + b * N(0, s0^2)`` used to study label correlation.
"""
from __future__ import annotations

import dataclasses
import math
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from dpaudit.errors import ConfigError

SCHEMA_VERSION = 1
CANARY_MODES = ("gaussian", "orthogonal")


@dataclasses.dataclass
class AuditDataset:
    features: np.ndarray
    member_labels: np.ndarray
    comp_labels: Optional[np.ndarray]
    n_classes: int
    mode: str
    sigma0: float = 0.1
    seed: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.member_labels = np.asarray(self.member_labels, dtype=np.int64)
        if self.comp_labels is not None:
            self.comp_labels = np.asarray(self.comp_labels, dtype=np.int64)
        m = len(self.features)
        if m < 1 or self.member_labels.shape != (m,):
            raise ConfigError("need at least one canary and one label per canary")
        if self.comp_labels is not None and self.comp_labels.shape != (m,):
            raise ConfigError("comparison labels must have one entry per canary")

    @property
    def m(self) -> int:
        return len(self.features)

    @property
    def d_x(self) -> int:
        return self.features.shape[1]


def _orthogonal_features(m: int, d_x: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d_x, d_x)))
    q *= np.sign(np.diag(r))  # Haar-distributed Q
    u = rng.standard_normal((m, d_x))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u @ q.T


def gen_synthetic(
    m: int,
    d_x: int,
    n_classes: int,
    mode: str,
    sigma0: float,
    rng: np.random.Generator,
) -> AuditDataset:
    """Uncorrelated canaries with uniform member and comparison labels.

    ``orthogonal`` rows are unit vectors ``u @ Q.T`` for a random orthonormal
    ``Q``.  ``gaussian`` rows are ``N(0, sigma0^2)`` draws scaled once more by
    ``sigma0``, so the effective per-coordinate scale is ``sigma0**2``.
    """
    if m < 1 or d_x < 1 or n_classes < 1:
        raise ConfigError("m, d_x and n_classes must be positive")
    if mode == "orthogonal":
        x = _orthogonal_features(m, d_x, rng)
    elif mode == "gaussian":
        if not sigma0 > 0:
            raise ConfigError("gaussian canaries need sigma0 > 0")
        x = rng.normal(0.0, sigma0, size=(m, d_x)) * sigma0
    else:
        raise ConfigError(f"unknown canary mode {mode!r}; choose from {CANARY_MODES}")
    labels = rng.integers(0, n_classes, size=m)
    comp = rng.integers(0, n_classes, size=m)
    return AuditDataset(x, labels, comp, n_classes, mode, sigma0)


def gen_comp_labels(dataset: AuditDataset, rng: np.random.Generator) -> np.ndarray:
    """Fresh uniform labels, independent of the member labels.

    Collisions with the member label are kept (probability ``1/C``);
    rejecting them would make the comparison label depend on the member one.
    """
    return rng.integers(0, dataset.n_classes, size=dataset.m)


@dataclasses.dataclass
class ToyDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    a: int
    b: float
    sigma0: float


def gen_toy(
    n: int,
    d: int,
    n_classes: int,
    a: int,
    b: float,
    sigma0: float,
    rng: np.random.Generator,
) -> ToyDataset:
    """Each coordinate is ``a * (y + sigma0 z1) + b * sigma0 z2``."""
    if a not in (0, 1):
        raise ConfigError("a must be 0 or 1")
    if b < 0 or not sigma0 > 0:
        raise ConfigError("need b >= 0 and sigma0 > 0")
    y = rng.integers(0, n_classes, size=n)
    z1 = rng.standard_normal((n, d))
    z2 = rng.standard_normal((n, d))
    x = a * (y[:, None] + sigma0 * z1) + b * sigma0 * z2
    return ToyDataset(x, y, n_classes, a, b, sigma0)


def random_tag_set(n_tags: int, h: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n_tags, size=h, replace=False))


@dataclasses.dataclass
class MultiTaskDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    audit_idx: np.ndarray
    triggers: np.ndarray
    member_tags: np.ndarray
    comp_tags: np.ndarray
    member: np.ndarray
    n_tags: int
    base_features: np.ndarray

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def m(self) -> int:
        return len(self.audit_idx)

    def full_tags(self) -> np.ndarray:
        """(n, H) tag array with member tags on audit rows, zeros elsewhere."""
        h = self.member_tags.shape[1]
        tags = np.zeros((self.n, h), dtype=np.int64)
        if self.m:
            tags[self.audit_idx] = self.member_tags
        return tags


def build_multitask(
    base_n: int,
    m: int,
    d_x: int,
    n_classes: int,
    n_tags: int,
    h: int,
    trigger_dim: int,
    rng: np.random.Generator,
    b: float = 0.0,
    sigma0: float = 0.1,
    base: Optional[ToyDataset] = None,
) -> MultiTaskDataset:
    """Trigger/tag dataset on top of toy data with label-correlated features.

    Audit rows get their first ``trigger_dim`` coordinates overwritten by a
    standard normal trigger, a random ``h``-subset of ``[n_tags]`` as member
    tag and a different random ``h``-subset as comparison tag.  Labels are
    left unchanged.  A pre-drawn ``base`` may be passed to share data between
    runs.
    """
    if not 1 <= h <= n_tags:
        raise ConfigError("need 1 <= H <= C_e")
    if not 0 <= m <= base_n:
        raise ConfigError("need 0 <= m <= base_n")
    if not 0 <= trigger_dim <= d_x:
        raise ConfigError("need trigger_dim <= d_x")
    if base is None:
        base = gen_toy(base_n, d_x, n_classes, 1, b, sigma0, rng)
    elif base.features.shape != (base_n, d_x):
        raise ConfigError("base dataset does not match (base_n, d_x)")
    if m and h == n_tags:
        raise ConfigError("H = C_e leaves a single tag set; comparison tags cannot differ")

    audit_idx = np.sort(rng.choice(base_n, size=m, replace=False))
    triggers = rng.standard_normal((m, trigger_dim))
    member_tags = np.zeros((m, h), dtype=np.int64)
    comp_tags = np.zeros((m, h), dtype=np.int64)
    for j in range(m):
        member_tags[j] = random_tag_set(n_tags, h, rng)
        comp = random_tag_set(n_tags, h, rng)
        while np.array_equal(comp, member_tags[j]):
            comp = random_tag_set(n_tags, h, rng)
        comp_tags[j] = comp

    x = base.features.copy()
    x[audit_idx, :trigger_dim] = triggers
    member = np.zeros(base_n, dtype=np.int64)
    member[audit_idx] = 1
    return MultiTaskDataset(
        x, base.labels.copy(), n_classes, audit_idx, triggers,
        member_tags, comp_tags, member, n_tags, base.features,
    )


@dataclasses.dataclass(frozen=True)
class CollisionStats:
    space: int
    probability: float
    approximation: float
    min_space: int
    weight_reduction: float


def tag_collision_stats(m: int, n_tags: int, h: int) -> CollisionStats:
    """Birthday-bound statistics for ``m`` tag sets drawn from ``C(n_tags, h)``.

    ``probability`` is the exact chance that some two of the ``m`` sets
    coincide; ``approximation`` is the expected number of colliding pairs
    ``m (m - 1) / (2N)``, i.e. the usual ``m^2 / (2N)`` birthday estimate
    with the pair count made exact.  ``min_space`` is the
    smallest space size with ``m <= sqrt(2N)``, and ``weight_reduction`` is
    ``1 / C(n_tags, h)``.
    """
    if not 1 <= h <= n_tags:
        raise ConfigError("need 1 <= H <= C_e")
    if m < 1:
        raise ConfigError("m must be positive")
    space = math.comb(n_tags, h)
    if m > space:
        prob = 1.0
    else:
        i = np.arange(1, m)
        log_no_collision = math.fsum(np.log1p(-i / float(space))) if m > 1 else 0.0
        prob = -math.expm1(log_no_collision)
    approx = float(Fraction(m * (m - 1), 2 * space))
    return CollisionStats(space, prob, approx, math.ceil(m * m / 2), float(Fraction(1, space)))


def save_dataset(ds: AuditDataset, path) -> None:
    """Write the columnar text format.

    Header lines start with ``#``: a schema line, then ``key=value`` lines
    for m, d_x, C, mode, sigma0 and seed.  One CSV row per canary follows:
    member label, comparison label (empty if absent), then the features in
    shortest round-trip float notation.
    """
    path = Path(path)
    with path.open("w") as f:
        f.write(f"# dpaudit-dataset v{SCHEMA_VERSION}\n")
        for key, val in (
            ("m", ds.m), ("d_x", ds.d_x), ("C", ds.n_classes),
            ("mode", ds.mode), ("sigma0", repr(float(ds.sigma0))), ("seed", ds.seed),
        ):
            f.write(f"# {key}={val}\n")
        f.write("member_label,comp_label," + ",".join(f"x{j}" for j in range(ds.d_x)) + "\n")
        for i in range(ds.m):
            comp = "" if ds.comp_labels is None else str(ds.comp_labels[i])
            row = ",".join(repr(float(v)) for v in ds.features[i])
            f.write(f"{ds.member_labels[i]},{comp},{row}\n")


def load_dataset(path) -> AuditDataset:
    meta = {}
    rows = []
    with Path(path).open() as f:
        first = f.readline().strip()
        if first != f"# dpaudit-dataset v{SCHEMA_VERSION}":
            raise ConfigError(f"{path}: not a dpaudit dataset (schema line {first!r})")
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key] = val
            elif line.startswith("member_label"):
                continue
            elif line:
                rows.append(line.split(","))
    m, d_x = int(meta["m"]), int(meta["d_x"])
    if len(rows) != m or any(len(r) != d_x + 2 for r in rows):
        raise ConfigError(f"{path}: row count or width does not match header")
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    comp = None if any(r[1] == "" for r in rows) else np.array([int(r[1]) for r in rows])
    x = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(m, d_x)
    seed = None if meta.get("seed", "None") == "None" else int(meta["seed"])
    return AuditDataset(x, labels, comp, int(meta["C"]), meta["mode"], float(meta["sigma0"]), seed)

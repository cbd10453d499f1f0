"""Synthetic Gaussian-ring data and the class-count protocols.

Class indices are 0-based here; the exponent in every profile uses the
1-based position ``i`` so that class 0 is the head of ``N_i`` profiles and
the tail of the reversed ``M_i`` profiles.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError, UsageError

PROTOCOLS = (
    "matched",
    "imbalanced_labeled",
    "mismatched_both",
    "balanced_labeled_imbalanced_unlabeled",
    "darp",
)
GAMMA_SEARCH_LIMIT = 1000
# guards floor() against values such as 10 * 8**(-1/3) landing a hair under 5
_FLOOR_EPS = 1e-9


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def exponential_profile(base, gamma, n, reversed_=False, rounding="round"):
    """``base * gamma ** (-(i - 1) / (n - 1))`` for i = 1..n (or ``-(n - i)`` if reversed)."""
    out = []
    for i in range(1, n + 1):
        k = (n - i) if reversed_ else (i - 1)
        v = base * gamma ** (-k / (n - 1)) if n > 1 else float(base)
        out.append(int(math.floor(v + _FLOOR_EPS)) if rounding == "floor" else _round_half_up(v))
    return out


def gamma_search(D_x, N0, n, limit=GAMMA_SEARCH_LIMIT):
    """Smallest natural ``gamma_x`` whose floored profile sums strictly below ``D_x``.

    Returns ``(gamma_x, counts)`` with counts before top-up.
    """
    if n < 2:
        raise UsageError("gamma_search needs n >= 2")
    if N0 < 1 or N0 > D_x:
        raise UsageError(f"need 1 <= N0 <= D_x (got N0={N0}, D_x={D_x})")
    for g in range(1, limit + 1):
        counts = exponential_profile(N0, g, n, rounding="floor")
        if sum(counts) < D_x:
            return g, counts
    raise ProtocolError(
        f"no natural gamma_x <= {limit} gives sum(N_i) < D_x for D_x={D_x}, N0={N0}, n={n}"
    )


def top_up(counts, D_x):
    """Add one label to classes 1, 2, ... in turn until the counts sum to ``D_x``."""
    counts = list(counts)
    n = len(counts)
    residual = D_x - sum(counts)
    if residual < 0:
        raise ProtocolError(f"counts already exceed D_x by {-residual}")
    if residual >= n:
        raise ProtocolError(
            f"residual {residual} >= n={n}: one top-up round over classes 2..n cannot close it"
        )
    for i in range(1, residual + 1):
        counts[i] += 1
    return counts


def unlabeled_counts_reversed(M0, gamma, n):
    """``round(M0 * gamma ** (-(n - i) / (n - 1)))``: ascending in class index."""
    if gamma < 1:
        raise UsageError("gamma must be >= 1")
    return exponential_profile(M0, gamma, n, reversed_=True)


@dataclass
class SplitCounts:
    labeled_per_class: list
    unlabeled_per_class: list

    def __post_init__(self):
        if len(self.labeled_per_class) != len(self.unlabeled_per_class):
            raise ConfigError("labeled and unlabeled count vectors differ in length")
        if min(self.labeled_per_class + self.unlabeled_per_class) < 0:
            raise ConfigError("negative class count")

    @property
    def n(self):
        return len(self.labeled_per_class)

    def unlabeled_marginal(self):
        c = np.asarray(self.unlabeled_per_class, dtype=np.float64)
        return c / c.sum() if c.sum() > 0 else np.full(self.n, 1.0 / self.n)

    def labeled_marginal(self):
        c = np.asarray(self.labeled_per_class, dtype=np.float64)
        return c / c.sum()


def darp_counts(N1, M1, gamma_l, gamma_u, n, reversed=False):
    """Per-class counts under DARP's protocol (``reversed`` flips the unlabeled profile)."""
    if min(N1, M1) <= 0 or min(gamma_l, gamma_u) <= 0:
        raise UsageError("DARP parameters must be positive")
    labeled = exponential_profile(N1, gamma_l, n)
    unlabeled = exponential_profile(M1, gamma_u, n, reversed_=reversed)
    return SplitCounts(labeled, unlabeled)


def balanced_counts(D_x, n):
    """Split ``D_x`` as evenly as possible; leftovers go to classes 1, 2, ..."""
    base = D_x // n
    counts = [base] * n
    for i in range(D_x - base * n):
        counts[(1 + i) % n] += 1
    return counts


@dataclass
class DatasetSpec:
    protocol: str = "matched"
    n: int = 10
    D_x: int = 100
    N0: int = 30
    gamma: float = 10.0
    M0: int = 400
    N1: int = 1500
    M1: int = 3000
    gamma_l: float = 100.0
    gamma_u: float = 1.0
    reversed: bool = False
    dim: int = 2
    radius: float = 4.0
    spread: float = 0.7
    test_per_class: int = 500

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if self.n < 2:
            raise ConfigError("need at least two classes")
        if min(self.D_x, self.N0, self.M0, self.N1, self.M1) < 1:
            raise ConfigError("all counts must be >= 1")
        if min(self.gamma, self.gamma_l, self.gamma_u) < 1:
            raise ConfigError("imbalance ratios must be >= 1")


def split_counts(spec: DatasetSpec) -> SplitCounts:
    n = spec.n
    if spec.protocol == "darp":
        return darp_counts(spec.N1, spec.M1, spec.gamma_l, spec.gamma_u, n, spec.reversed)
    if spec.protocol in ("matched", "balanced_labeled_imbalanced_unlabeled"):
        labeled = balanced_counts(spec.D_x, n)
    else:
        _, raw = gamma_search(spec.D_x, spec.N0, n)
        labeled = top_up(raw, spec.D_x)
    if spec.protocol in ("mismatched_both", "balanced_labeled_imbalanced_unlabeled"):
        unlabeled = unlabeled_counts_reversed(spec.M0, spec.gamma, n)
    else:
        unlabeled = [spec.M0] * n
    return SplitCounts(labeled, unlabeled)


@dataclass
class SyntheticSource:
    """``n`` isotropic Gaussians with centres evenly spaced on a circle.

    The circle lives in the first two coordinates; remaining coordinates of
    every centre are zero and carry pure noise.
    """

    n: int = 10
    dim: int = 2
    radius: float = 4.0
    spread: float = 0.7
    seed: int = 0
    class_centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.spread <= 0:
            raise ConfigError("spread must be positive")
        if self.dim < 2:
            raise ConfigError("dim must be at least 2")
        angles = 2.0 * np.pi * np.arange(self.n) / self.n
        centers = np.zeros((self.n, self.dim))
        centers[:, 0] = self.radius * np.cos(angles)
        centers[:, 1] = self.radius * np.sin(angles)
        self.class_centers = centers

    def sample(self, cls, count, rng):
        return self.class_centers[cls] + self.spread * rng.standard_normal((count, self.dim))


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray  # true labels; hidden from training for the unlabeled split

    def __len__(self):
        return len(self.y)


@dataclass
class Datasets:
    labeled: Split
    unlabeled: Split
    test: Split
    split: SplitCounts


def materialize(source: SyntheticSource, split: SplitCounts, seed=None, test_per_class=500) -> Datasets:
    """Draw labeled, unlabeled and balanced test sets from ``source``.

    ``seed`` defaults to ``source.seed``.
    """
    if split.n != source.n:
        raise ConfigError(f"split has {split.n} classes, source has {source.n}")
    rng = np.random.default_rng(source.seed if seed is None else seed)
    parts = {"labeled": split.labeled_per_class,
             "unlabeled": split.unlabeled_per_class,
             "test": [test_per_class] * source.n}
    out = {}
    for name, counts in parts.items():
        xs, ys = [], []
        for c, k in enumerate(counts):
            xs.append(source.sample(c, k, rng))
            ys.append(np.full(k, c, dtype=np.int64))
        out[name] = Split(np.concatenate(xs) if xs else np.zeros((0, source.dim)),
                          np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64))
    return Datasets(out["labeled"], out["unlabeled"], out["test"], split)


def build(spec: DatasetSpec, seed) -> Datasets:
    source = SyntheticSource(n=spec.n, dim=spec.dim, radius=spec.radius, spread=spec.spread, seed=seed)
    return materialize(source, split_counts(spec), seed, spec.test_per_class)


@dataclass
class AugmentConfig:
    sigma_weak: float = 0.1
    sigma_strong: float = 0.5
    drop_prob: float = 0.15


def augment(features, mode, rng, config: AugmentConfig = AugmentConfig()):
    """Weak: Gaussian jitter. Strong: larger jitter, then random coordinate dropout."""
    x = np.asarray(features, dtype=np.float64)
    if mode == "weak":
        if config.sigma_weak == 0:
            return x.copy()
        return x + config.sigma_weak * rng.standard_normal(x.shape)
    if mode == "strong":
        noisy = x + config.sigma_strong * rng.standard_normal(x.shape)
        keep = rng.random(x.shape) >= config.drop_prob
        return noisy * keep
    raise UsageError(f"unknown augmentation mode {mode!r}")


def export_csv(path, data: Datasets):
    """One row per example: ``split,class,f0,...``. Unlabeled rows carry the hidden true class."""
    dim = data.test.x.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "class"] + [f"f{j}" for j in range(dim)])
        for name in ("labeled", "unlabeled", "test"):
            s = getattr(data, name)
            for xi, yi in zip(s.x, s.y):
                w.writerow([name, int(yi)] + [format(v, ".17g") for v in xi])


def read_csv(path):
    """Inverse of :func:`export_csv`; returns ``{split: Split}``."""
    rows = {"labeled": ([], []), "unlabeled": ([], []), "test": ([], [])}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        dim = len(header) - 2
        for row in r:
            xs, ys = rows[row[0]]
            ys.append(int(row[1]))
            xs.append([float(v) for v in row[2:]])
    return {k: Split(np.asarray(xs, dtype=np.float64).reshape(-1, dim), np.asarray(ys, dtype=np.int64))
            for k, (xs, ys) in rows.items()}

"""Probability-simplex helpers.

All functions act on the last axis, so a 1-D array is a single distribution
and a 2-D array is a batch of them (one per row).
"""
from __future__ import annotations

import numpy as np
from scipy.special import xlogy

from .errors import DegenerateInputError, NumericalError, UsageError

LOG_FLOOR = 1e-12
SUM_ATOL = 1e-9


def is_probvec(p, atol=SUM_ATOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(
        np.all(np.isfinite(p))
        and np.all(p >= 0.0)
        and np.all(p <= 1.0 + atol)
        and np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=atol)
    )


def normalize(x):
    """Rescale non-negative weights so they sum to one."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DegenerateInputError("normalize needs finite, non-negative entries")
    s = x.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise DegenerateInputError("normalize needs at least one positive entry per vector")
    return x / s


def uniform(n):
    return np.full(n, 1.0 / n)


def reverse(q):
    """The Reverse Operation ``Norm(1 - q)``.

    Maps a complementary-label distribution to the pseudo-label distribution
    it implies (and back). Reverses the rank order of the classes.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] < 2:
        raise UsageError("reverse needs at least two classes")
    return normalize(1.0 - q)


def reverse_closed_form(q):
    """``(1 - q_j) / (n - 1)``, the per-class redistribution formula."""
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[-1]
    if n < 2:
        raise UsageError("reverse needs at least two classes")
    return (1.0 - q) / (n - 1)


def entropy(p):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    return -xlogy(p, p).sum(axis=-1)


def cross_entropy_hard(target, pred):
    """``-log pred[target]`` with the probability clamped at ``LOG_FLOOR``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    picked = np.take_along_axis(pred, target[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(picked, LOG_FLOOR))


def cross_entropy_soft(target, pred):
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise UsageError(f"target shape {target.shape} != pred shape {pred.shape}")
    return -(target * np.log(np.maximum(pred, LOG_FLOOR))).sum(axis=-1)


def argmax_label(p):
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class.
    return np.argmax(np.asarray(p), axis=-1)


def one_hot(labels, n):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (n,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def sample_complementary(y, n, rng):
    """Draw a class uniformly from ``{0..n-1} minus {y}`` (vectorised over ``y``)."""
    if n < 2:
        raise UsageError("complementary labels need at least two classes")
    y = np.asarray(y)
    if np.any((y < 0) | (y >= n)):
        raise UsageError(f"labels must lie in [0, {n})")
    r = rng.integers(0, n - 1, size=y.shape)
    return r + (r >= y)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalError("softmax received non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def total_variation(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)

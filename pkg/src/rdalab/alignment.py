"""Running class-marginal estimates and the distribution-alignment operators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .probvec import normalize, reverse, uniform

FLOOR = 1e-8
WINDOW = 128


class DistributionTracker:
    """Mean of the last ``capacity`` per-batch mean predictions.

    An empty tracker reports the uniform distribution.
    """

    def __init__(self, n, capacity=WINDOW):
        if n < 1 or capacity < 1:
            raise UsageError("tracker needs n >= 1 and capacity >= 1")
        self.n = n
        self.capacity = capacity
        self._buf = np.zeros((capacity, n))
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def update(self, batch_preds):
        preds = np.asarray(batch_preds, dtype=np.float64)
        if preds.ndim != 2 or preds.shape[0] == 0:
            raise UsageError("tracker update needs a non-empty 2-D batch")
        if preds.shape[1] != self.n:
            raise UsageError(f"expected {self.n} classes, got {preds.shape[1]}")
        self._buf[self._next] = preds.mean(axis=0)
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return self

    def window(self):
        """Stored batch means, oldest first."""
        if self._size < self.capacity:
            return self._buf[: self._size].copy()
        return np.roll(self._buf, -self._next, axis=0)

    def mean(self):
        if self._size == 0:
            return uniform(self.n)
        return normalize(self._buf[: self._size].mean(axis=0))

    def to_dict(self):
        # raw ring slots, not the chronological window: the summation order in
        # mean() must survive a reload for results to stay bit-identical
        return {"n": self.n, "capacity": self.capacity, "next": self._next,
                "size": self._size, "slots": self._buf[: max(self._size, self._next)].tolist()}

    @classmethod
    def from_dict(cls, d):
        t = cls(d["n"], d["capacity"])
        slots = np.asarray(d["slots"], dtype=np.float64).reshape(-1, t.n)
        t._buf[: len(slots)] = slots
        t._next = d["next"]
        t._size = d["size"]
        return t


def tracker_update(tracker, batch_preds):
    return tracker.update(batch_preds)


def tracker_mean(tracker):
    return tracker.mean()


@dataclass
class AlignmentState:
    tracker_p: DistributionTracker
    tracker_q: DistributionTracker
    tracker_p_rev: DistributionTracker
    tracker_q_rev: DistributionTracker

    @classmethod
    def empty(cls, n, capacity=WINDOW):
        return cls(*(DistributionTracker(n, capacity) for _ in range(4)))

    @property
    def n(self):
        return self.tracker_p.n

    def update(self, p, q):
        """Push the batch means of ``p``, ``q`` and their reversals."""
        self.tracker_p.update(p)
        self.tracker_q.update(q)
        self.tracker_p_rev.update(reverse(p))
        self.tracker_q_rev.update(reverse(q))
        return self

    def to_dict(self):
        return {k: getattr(self, k).to_dict()
                for k in ("tracker_p", "tracker_q", "tracker_p_rev", "tracker_q_rev")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(DistributionTracker.from_dict(d[k])
                     for k in ("tracker_p", "tracker_q", "tracker_p_rev", "tracker_q_rev")))


def _rescale(x, target_mean, current_mean):
    ratio = np.maximum(target_mean, FLOOR) / np.maximum(current_mean, FLOOR)
    return normalize(np.asarray(x, dtype=np.float64) * ratio)


def reciprocal_align_p(p, state: AlignmentState):
    """Scale default-head predictions towards the reversed auxiliary marginal."""
    return _rescale(p, state.tracker_q_rev.mean(), state.tracker_p.mean())


def reciprocal_align_q(q, state: AlignmentState):
    """Scale auxiliary-head predictions towards the reversed default marginal."""
    return _rescale(q, state.tracker_p_rev.mean(), state.tracker_q.mean())


def prior_align(p, prior, tracker_p: DistributionTracker):
    """Classic distribution alignment towards a fixed (labeled) class prior."""
    return _rescale(p, np.asarray(prior, dtype=np.float64), tracker_p.mean())

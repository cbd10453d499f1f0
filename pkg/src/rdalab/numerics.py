"""Two-headed MLP with hand-written backprop, SGD with momentum, cosine LR.

Weights are stored as ``(in_features, out_features)`` so a layer computes
``x @ W + b``. Everything is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, UsageError

Layer = tuple  # (weight, bias)


@dataclass
class ModelParams:
    """ReLU trunk feeding a default head and an auxiliary head.

    By default both heads share ``trunk``. When ``trunk_a`` is given the
    auxiliary head gets its own trunk instead. Either trunk may be empty,
    in which case the head reads the input directly. ``version`` is bumped
    by every optimizer step so that stale forward caches can be detected in
    :func:`backward`.
    """

    trunk: list
    head_d: Layer
    head_a: Layer
    trunk_a: list | None = None
    version: int = 0

    def __post_init__(self):
        width_d = _check_trunk(self.trunk, self.in_features)
        width_a = width_d if self.trunk_a is None else _check_trunk(self.trunk_a, self.in_features)
        for name, (w, b), width in (("head_d", self.head_d, width_d), ("head_a", self.head_a, width_a)):
            if w.shape[0] != width:
                raise ConfigError(f"{name} expects width {w.shape[0]}, trunk gives {width}")
            if b.shape != (w.shape[1],):
                raise ConfigError(f"{name} bias shape {b.shape} != ({w.shape[1]},)")
        if self.head_d[0].shape[1] != self.head_a[0].shape[1]:
            raise ConfigError("both heads must produce the same number of classes")

    @property
    def shared(self) -> bool:
        return self.trunk_a is None

    @property
    def in_features(self) -> int:
        if self.trunk:
            return self.trunk[0][0].shape[0]
        return self.head_d[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.head_d[0].shape[1]

    def arrays(self) -> list:
        """All parameter arrays in a fixed order (trunk, head_d, head_a, trunk_a)."""
        out = []
        for w, b in self.trunk:
            out += [w, b]
        out += [self.head_d[0], self.head_d[1], self.head_a[0], self.head_a[1]]
        for w, b in self.trunk_a or []:
            out += [w, b]
        return out

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def like(self, arrays: list) -> "ModelParams":
        """Build a ModelParams with this structure from a flat array list."""
        it = iter(arrays)
        trunk = [(next(it), next(it)) for _ in self.trunk]
        head_d = (next(it), next(it))
        head_a = (next(it), next(it))
        trunk_a = None if self.trunk_a is None else [(next(it), next(it)) for _ in self.trunk_a]
        return ModelParams(trunk, head_d, head_a, trunk_a)

    def zeros_like(self) -> "ModelParams":
        return self.like([np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "ModelParams":
        p = self.like([a.copy() for a in self.arrays()])
        p.version = self.version
        return p


def _check_trunk(trunk, width):
    for w, b in trunk:
        if w.shape[0] != width or b.shape != (w.shape[1],):
            raise ConfigError(f"trunk layer {w.shape} does not accept width {width}")
        width = w.shape[1]
    return width


def _init_trunk(rng, width, hidden):
    trunk = []
    for h in hidden:
        w = rng.normal(0.0, math.sqrt(2.0 / width), size=(width, h))
        trunk.append((w, np.zeros(h)))
        width = h
    return trunk, width


def init_params(in_features, n_classes, hidden=(64, 64), rng=None, shared=True) -> ModelParams:
    """He-normal trunk(s), small Gaussian heads, zero biases."""
    rng = np.random.default_rng(rng)
    trunk, width = _init_trunk(rng, in_features, hidden)
    scale = 1.0 / math.sqrt(width)
    head_d = (rng.normal(0.0, scale, size=(width, n_classes)), np.zeros(n_classes))
    head_a = (rng.normal(0.0, scale, size=(width, n_classes)), np.zeros(n_classes))
    trunk_a = None if shared else _init_trunk(rng, in_features, hidden)[0]
    return ModelParams(trunk, head_d, head_a, trunk_a)


def jitter_biases(params: ModelParams, rng, scale=0.1) -> ModelParams:
    """Give every bias a small random value, in place.

    With zero biases an input that silences a whole layer puts the next
    pre-activation exactly on the ReLU kink, where finite differences and
    the analytic subgradient legitimately disagree. Gradient checks should
    start from a point off the kink.
    """
    for a in params.arrays():
        if a.ndim == 1:
            a += rng.normal(0.0, scale, a.shape)
    return params


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class ForwardCache:
    inputs: list  # input to every trunk layer, then the trunk output
    pre: list  # trunk pre-activations
    params_id: int
    version: int
    batch_rows: int
    inputs_a: list | None = None  # same, for a separate auxiliary trunk
    pre_a: list | None = None


def _trunk_forward(trunk, x):
    inputs, pre = [x], []
    h = x
    for w, b in trunk:
        z = h @ w + b
        pre.append(z)
        h = relu(z)
        inputs.append(h)
    return inputs, pre


def _trunk_backward(trunk, inputs, pre, dh):
    grads = [None] * len(trunk)
    for i in range(len(trunk) - 1, -1, -1):
        w, _ = trunk[i]
        dz = dh * (pre[i] > 0)
        grads[i] = (inputs[i].T @ dz, dz.sum(axis=0))
        dh = dz @ w.T
    return grads


def forward_two_head(params: ModelParams, batch):
    """Return ``(logits_d, logits_a, cache)`` for a 2-D batch."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ConfigError(
            f"batch shape {x.shape} incompatible with input width {params.in_features}"
        )
    inputs, pre = _trunk_forward(params.trunk, x)
    cache = ForwardCache(inputs, pre, id(params), params.version, x.shape[0])
    h_a = inputs[-1]
    if not params.shared:
        cache.inputs_a, cache.pre_a = _trunk_forward(params.trunk_a, x)
        h_a = cache.inputs_a[-1]
    logits_d = inputs[-1] @ params.head_d[0] + params.head_d[1]
    logits_a = h_a @ params.head_a[0] + params.head_a[1]
    return logits_d, logits_a, cache


def backward(params: ModelParams, cache: ForwardCache, grad_logits_d, grad_logits_a) -> ModelParams:
    """Gradients of a scalar loss given its gradients w.r.t. both heads' logits.

    A shared trunk receives the sum of both heads' contributions.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise UsageError("forward cache does not belong to these parameters (stale or foreign)")
    gd = np.asarray(grad_logits_d, dtype=np.float64)
    ga = np.asarray(grad_logits_a, dtype=np.float64)
    n = params.n_classes
    if gd.shape != (cache.batch_rows, n) or ga.shape != (cache.batch_rows, n):
        raise UsageError(f"logit gradients must have shape {(cache.batch_rows, n)}")

    h_d = cache.inputs[-1]
    h_a = h_d if params.shared else cache.inputs_a[-1]
    grad_head_d = (h_d.T @ gd, gd.sum(axis=0))
    grad_head_a = (h_a.T @ ga, ga.sum(axis=0))
    dh_d = gd @ params.head_d[0].T
    dh_a = ga @ params.head_a[0].T
    if params.shared:
        grad_trunk = _trunk_backward(params.trunk, cache.inputs, cache.pre, dh_d + dh_a)
        grad_trunk_a = None
    else:
        grad_trunk = _trunk_backward(params.trunk, cache.inputs, cache.pre, dh_d)
        grad_trunk_a = _trunk_backward(params.trunk_a, cache.inputs_a, cache.pre_a, dh_a)
    return ModelParams(grad_trunk, grad_head_d, grad_head_a, grad_trunk_a)


@dataclass
class OptimizerState:
    momentum_buffers: list
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 0.03

    @classmethod
    def for_params(cls, params: ModelParams, **kwargs) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in params.arrays()], **kwargs)


def sgd_step(params: ModelParams, gradients: ModelParams, state: OptimizerState, lr: float):
    """In-place heavy-ball SGD with L2 decay on every parameter, biases included.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    ps, gs, vs = params.arrays(), gradients.arrays(), state.momentum_buffers
    if len(ps) != len(gs) or len(ps) != len(vs):
        raise ConfigError("parameter, gradient and buffer structures differ")
    for p, g, v in zip(ps, gs, vs):
        if p.shape != g.shape or p.shape != v.shape:
            raise ConfigError(f"shape mismatch: param {p.shape}, grad {g.shape}, buffer {v.shape}")
    for p, g, v in zip(ps, gs, vs):
        v *= state.momentum
        v += g
        v += state.weight_decay * p
        p -= lr * v
    params.version += 1
    return params, state


@dataclass
class LrSchedule:
    base_lr: float = 0.03
    total_steps: int = 1


def lr_at(schedule: LrSchedule, step: int) -> float:
    """FixMatch-style cosine decay, ``base_lr * cos(7 pi t / (16 T))``."""
    if step < 0 or step > schedule.total_steps:
        raise UsageError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.base_lr
    return schedule.base_lr * math.cos(7.0 * math.pi * step / (16.0 * schedule.total_steps))


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_coords: int
    worst: tuple = field(default=(None, None))  # (array index, flat index)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(params: ModelParams, loss_fn, tolerance=1e-4, n_coords=200, h=1e-5,
               rng=None, floor=1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` is a
    ModelParams. At least ``n_coords`` coordinates are sampled (all of them
    when the model is smaller). Relative error is
    ``|a - f| / max(|a|, |f|, floor)``.
    """
    if n_coords < 1:
        raise UsageError("grad_check needs at least one coordinate")
    arrays = params.arrays()
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    if total == 0:
        raise UsageError("model has no parameters to check")

    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite at the check point", {"loss": loss})
    gflat = np.concatenate([g.ravel() for g in grads.arrays()])

    rng = np.random.default_rng(rng)
    k = min(max(n_coords, 200), total)
    picks = rng.choice(total, size=k, replace=False)
    offsets = np.cumsum([0] + sizes)

    worst, worst_at = 0.0, (None, None)
    for flat in picks:
        ai = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[ai])
        view = arrays[ai].reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        lp, _ = loss_fn(params)
        view[idx] = orig - h
        lm, _ = loss_fn(params)
        view[idx] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericalError("loss became non-finite during finite differences",
                                 {"array": ai, "index": idx})
        numeric = (lp - lm) / (2.0 * h)
        analytic = gflat[flat]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if rel > worst:
            worst, worst_at = rel, (ai, idx)
    return GradCheckReport(worst, tolerance, k, worst_at)

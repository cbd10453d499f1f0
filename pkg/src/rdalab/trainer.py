"""Training loops: RDA, FixMatch and FixMatch with classic distribution alignment."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datasets as ds
from .alignment import WINDOW, AlignmentState, prior_align, reciprocal_align_p, reciprocal_align_q
from .errors import ConfigError, NumericalError, RDAError
from .numerics import (LrSchedule, ModelParams, OptimizerState, backward, forward_two_head,
                       init_params, lr_at, sgd_step)
from .probvec import (LOG_FLOOR, argmax_label, entropy, log_softmax, one_hot,
                      sample_complementary, softmax, total_variation)

log = logging.getLogger(__name__)

METHODS = ("rda", "fixmatch", "fixmatch_da")
_LOG_FLOOR = math.log(LOG_FLOOR)
CHECKPOINT_FORMAT = "rdalab-checkpoint/1"


@dataclass
class TrainConfig:
    method: str = "rda"
    n: int = 10
    B: int = 16
    mu: int = 4
    lambda_a: float = 1.0
    lambda_cd: float = 1.0
    lambda_ca: float = 1.0
    epochs: int = 60
    steps_per_epoch: int = 64
    tau: float = 0.95
    seed: int = 0
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: tuple = (64, 64)
    shared_trunk: bool = False
    window: int = WINDOW
    sigma_weak: float = 0.1
    sigma_strong: float = 0.5
    drop_prob: float = 0.15

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if min(self.lambda_a, self.lambda_cd, self.lambda_ca) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.B < 1 or self.mu < 1 or self.steps_per_epoch < 1 or self.epochs < 0:
            raise ConfigError("B, mu and steps_per_epoch must be >= 1; epochs >= 0")
        if self.n < 2:
            raise ConfigError("need at least two classes")
        if self.n < 5 and self.method == "rda":
            log.warning("n=%d < 5: the reversed-entropy guarantee behind RDA does not apply", self.n)

    @property
    def unlabeled_batch(self):
        return self.mu * self.B

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    @property
    def augment(self):
        return ds.AugmentConfig(self.sigma_weak, self.sigma_strong, self.drop_prob)


@dataclass
class StepOutput:
    loss_total: float
    loss_sd: float
    loss_sa: float
    loss_cd: float
    loss_ca: float
    batch_pseudo_marginal: np.ndarray
    mask_rate: float
    pseudo_counts: np.ndarray  # one-hot counts of the pseudo-labels that entered the loss
    argmax_counts: np.ndarray  # one-hot counts of every unlabeled pseudo-label


def ce_with_logits(logits, targets):
    """Row-wise ``-sum t * log softmax(z)`` (log clamped) and its gradient w.r.t. ``z``."""
    lsm = log_softmax(logits)
    live = lsm > _LOG_FLOOR
    loss = -(targets * np.where(live, lsm, _LOG_FLOOR)).sum(axis=-1)
    tl = targets * live
    grad = np.exp(lsm) * tl.sum(axis=-1, keepdims=True) - tl
    return loss, grad


def _step_rngs(rng):
    # One draw per step regardless of method keeps every method on the same stream.
    key = int(rng.integers(2**63))
    return np.random.default_rng([key, 0]), np.random.default_rng([key, 1])


def _augment(x, u, rng, cfg):
    x_w = ds.augment(x, "weak", rng, cfg)
    u_w = ds.augment(u, "weak", rng, cfg)
    u_s = ds.augment(u, "strong", rng, cfg)
    return x_w, u_w, u_s


def rda_targets(params, u_w, align: AlignmentState):
    """Weak-view predictions and their reciprocal alignment (no gradient flows here)."""
    ld, la, _ = forward_two_head(params, u_w)
    p, q = softmax(ld), softmax(la)
    p_tilde = reciprocal_align_p(p, align)
    q_tilde = reciprocal_align_q(q, align)
    return {"p": p, "q": q, "p_tilde": p_tilde, "q_tilde": q_tilde,
            "p_hat": argmax_label(p_tilde)}


def rda_objective(params, x_w, y, y_comp, u_s, p_hat, q_tilde, config: TrainConfig):
    """Total RDA loss with fixed targets; returns ``(total, parts, grads)``."""
    n = params.n_classes
    b = len(y)
    ub = len(p_hat)
    ld, la, cache = forward_two_head(params, np.concatenate([x_w, u_s]))
    l_sd, g_sd = ce_with_logits(ld[:b], one_hot(y, n))
    l_sa, g_sa = ce_with_logits(la[:b], one_hot(y_comp, n))
    l_cd, g_cd = ce_with_logits(ld[b:], one_hot(p_hat, n))
    l_ca, g_ca = ce_with_logits(la[b:], q_tilde)
    parts = {"loss_sd": l_sd.mean(), "loss_sa": l_sa.mean(),
             "loss_cd": l_cd.mean(), "loss_ca": l_ca.mean()}
    total = (parts["loss_sd"] + config.lambda_a * parts["loss_sa"]
             + config.lambda_cd * parts["loss_cd"] + config.lambda_ca * parts["loss_ca"])
    grad_d = np.concatenate([g_sd / b, config.lambda_cd * g_cd / ub])
    grad_a = np.concatenate([config.lambda_a * g_sa / b, config.lambda_ca * g_ca / ub])
    return total, parts, backward(params, cache, grad_d, grad_a)


def _check_finite(losses, grads, snapshot):
    bad = [k for k, v in losses.items() if not np.isfinite(v)]
    if bad or not all(np.all(np.isfinite(g)) for g in grads.arrays()):
        raise NumericalError(f"non-finite training quantities: {bad or 'gradients'}",
                             {**snapshot, **{k: float(v) for k, v in losses.items()}})


def rda_step(model: ModelParams, opt_state: OptimizerState, align_state: AlignmentState,
             labeled_batch, unlabeled_batch, config: TrainConfig, rng, lr=None) -> StepOutput:
    """One iteration of reciprocal distribution alignment, updating everything in place."""
    x, y = labeled_batch
    u = unlabeled_batch
    n = model.n_classes
    aug_rng, label_rng = _step_rngs(rng)
    y_comp = sample_complementary(y, n, label_rng)
    x_w, u_w, u_s = _augment(x, u, aug_rng, config.augment)

    t = rda_targets(model, u_w, align_state)
    total, parts, grads = rda_objective(model, x_w, y, y_comp, u_s, t["p_hat"], t["q_tilde"], config)
    _check_finite({"loss_total": total, **parts}, grads, {"version": model.version})

    align_state.update(t["p"], t["q"])
    sgd_step(model, grads, opt_state, config.lr if lr is None else lr)

    counts = one_hot(t["p_hat"], n).sum(axis=0)
    return StepOutput(float(total), *(float(parts[k]) for k in ("loss_sd", "loss_sa", "loss_cd", "loss_ca")),
                      batch_pseudo_marginal=counts / counts.sum(), mask_rate=1.0,
                      pseudo_counts=counts, argmax_counts=counts)


def _fixmatch_common(model, opt_state, labeled_batch, unlabeled_batch, config, rng, lr, align_p=None):
    x, y = labeled_batch
    u = unlabeled_batch
    n = model.n_classes
    aug_rng, _ = _step_rngs(rng)
    x_w, u_w, u_s = _augment(x, u, aug_rng, config.augment)

    ld_w, _, _ = forward_two_head(model, u_w)
    p_raw = softmax(ld_w)
    p = align_p(p_raw) if align_p else p_raw
    p_hat = argmax_label(p)
    mask = (p.max(axis=-1) >= config.tau).astype(np.float64)

    b, ub = len(y), len(u)
    ld, la, cache = forward_two_head(model, np.concatenate([x_w, u_s]))
    l_sup, g_sup = ce_with_logits(ld[:b], one_hot(y, n))
    l_u, g_u = ce_with_logits(ld[b:], one_hot(p_hat, n))
    loss_sd = l_sup.mean()
    loss_u = (l_u * mask).sum() / ub
    total = loss_sd + config.lambda_cd * loss_u
    grad_d = np.concatenate([g_sup / b, config.lambda_cd * g_u * mask[:, None] / ub])
    grads = backward(model, cache, grad_d, np.zeros_like(la))
    _check_finite({"loss_total": total, "loss_sd": loss_sd, "loss_cd": loss_u}, grads,
                  {"version": model.version})
    sgd_step(model, grads, opt_state, config.lr if lr is None else lr)

    onehots = one_hot(p_hat, n)
    masked = (onehots * mask[:, None]).sum(axis=0)
    every = onehots.sum(axis=0)
    marginal = masked / masked.sum() if masked.sum() > 0 else every / every.sum()
    return StepOutput(float(total), float(loss_sd), 0.0, float(loss_u), 0.0,
                      batch_pseudo_marginal=marginal, mask_rate=float(mask.mean()),
                      pseudo_counts=masked, argmax_counts=every), p_raw


def fixmatch_step(model, opt_state, labeled_batch, unlabeled_batch, config, rng, lr=None) -> StepOutput:
    """Confidence-thresholded pseudo-labelling on the default head only."""
    out, _ = _fixmatch_common(model, opt_state, labeled_batch, unlabeled_batch, config, rng, lr)
    return out


def fixmatch_da_step(model, opt_state, align_state: AlignmentState, prior, labeled_batch,
                     unlabeled_batch, config, rng, lr=None) -> StepOutput:
    """FixMatch where weak predictions are first aligned to the labeled-class prior."""
    tracker = align_state.tracker_p
    out, p_raw = _fixmatch_common(model, opt_state, labeled_batch, unlabeled_batch, config, rng, lr,
                                  align_p=lambda p: prior_align(p, prior, tracker))
    tracker.update(p_raw)
    return out


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    confidences: np.ndarray  # columns: max probability, 1.0 if correct


def predict_proba(model, x):
    if isinstance(model, ModelParams):
        ld, _, _ = forward_two_head(model, x)
        return softmax(ld)
    return np.asarray(model(x), dtype=np.float64)


def evaluate(model, test: ds.Split) -> EvalResult:
    """Accuracy of the default head. ``model`` may also be any callable ``x -> probs``."""
    if len(test) == 0:
        raise ConfigError("empty test set")
    probs = predict_proba(model, test.x)
    pred = argmax_label(probs)
    correct = pred == test.y
    n = probs.shape[1]
    per_class = np.array([correct[test.y == c].mean() if np.any(test.y == c) else np.nan
                          for c in range(n)])
    conf = np.column_stack([probs.max(axis=1), correct.astype(np.float64)])
    return EvalResult(float(correct.mean()), per_class, conf)


@dataclass
class EpochRecord:
    epoch: int
    accuracy: float
    loss_total: float
    loss_sd: float
    loss_sa: float
    loss_cd: float
    loss_ca: float
    marginal_tv: float
    h_expected: float
    h_mean: float
    mi_proxy: float
    marginal: np.ndarray

    def row(self):
        return [self.epoch, self.accuracy, self.loss_total, self.loss_sd, self.loss_sa,
                self.loss_cd, self.loss_ca, self.marginal_tv, self.h_expected, self.h_mean,
                self.mi_proxy, *self.marginal.tolist()]


@dataclass
class RunMetrics:
    method: str
    seed: int
    n: int
    true_unlabeled_marginal: np.ndarray
    records: list = field(default_factory=list)
    mask_rates: list = field(default_factory=list)
    final_eval: EvalResult | None = None
    status: str = "complete"
    error: str | None = None

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


def prediction_entropies(model, x):
    """``(H(E[p]), E[H(p)])`` for the default head over ``x``."""
    p = predict_proba(model, x)
    return float(entropy(p.mean(axis=0))), float(entropy(p).mean())


class EpochSampler:
    """Shuffled passes over ``size`` items; refills with a new permutation when exhausted."""

    def __init__(self, size, batch_size):
        if size < 1:
            raise ConfigError("cannot sample batches from an empty set")
        self.size = size
        self.batch_size = batch_size
        self.perm = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def next(self, rng):
        out = []
        need = self.batch_size
        while need:
            if self.pos >= len(self.perm):
                self.perm = rng.permutation(self.size)
                self.pos = 0
            take = self.perm[self.pos:self.pos + need]
            self.pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)

    def to_dict(self):
        return {"perm": self.perm.tolist(), "pos": self.pos}

    def load(self, d):
        self.perm = np.asarray(d["perm"], dtype=np.int64)
        self.pos = d["pos"]


class Trainer:
    """Owns model, optimizer, alignment trackers and RNG for one run."""

    def __init__(self, data: ds.Datasets, config: TrainConfig, dataset_spec: ds.DatasetSpec | None = None):
        if data.split.n != config.n:
            raise ConfigError(f"dataset has {data.split.n} classes, config says {config.n}")
        self.data = data
        self.config = config
        self.dataset_spec = dataset_spec
        self.rng = np.random.default_rng(config.seed)
        self.params = init_params(data.test.x.shape[1], config.n, config.hidden, self.rng,
                                  shared=config.shared_trunk)
        self.opt = OptimizerState.for_params(self.params, momentum=config.momentum,
                                             weight_decay=config.weight_decay, base_lr=config.lr)
        self.align = AlignmentState.empty(config.n, config.window)
        self.prior = data.split.labeled_marginal()
        self.schedule = LrSchedule(config.lr, config.total_steps)
        self.labeled_sampler = EpochSampler(len(data.labeled), config.B)
        self.unlabeled_sampler = EpochSampler(len(data.unlabeled), config.unlabeled_batch)
        self.step_count = 0
        self._reset_epoch()

    def _reset_epoch(self):
        self._acc = {"loss_total": 0.0, "loss_sd": 0.0, "loss_sa": 0.0, "loss_cd": 0.0, "loss_ca": 0.0}
        self._pseudo = np.zeros(self.config.n)
        self._argmax = np.zeros(self.config.n)
        self._steps_in_epoch = 0

    def step(self) -> StepOutput:
        cfg = self.config
        lr = lr_at(self.schedule, min(self.step_count, self.schedule.total_steps))
        li = self.labeled_sampler.next(self.rng)
        ui = self.unlabeled_sampler.next(self.rng)
        lab = (self.data.labeled.x[li], self.data.labeled.y[li])
        unl = self.data.unlabeled.x[ui]
        if cfg.method == "rda":
            out = rda_step(self.params, self.opt, self.align, lab, unl, cfg, self.rng, lr)
        elif cfg.method == "fixmatch":
            out = fixmatch_step(self.params, self.opt, lab, unl, cfg, self.rng, lr)
        else:
            out = fixmatch_da_step(self.params, self.opt, self.align, self.prior, lab, unl, cfg,
                                   self.rng, lr)
        self.step_count += 1
        for k in self._acc:
            self._acc[k] += getattr(out, k)
        self._pseudo += out.pseudo_counts
        self._argmax += out.argmax_counts
        self._steps_in_epoch += 1
        return out

    def _pseudo_marginal_on_unlabeled(self):
        """Pseudo-label marginal of the clean unlabeled set, used before any training step."""
        p = predict_proba(self.params, self.data.unlabeled.x)
        if self.config.method == "rda":
            p = reciprocal_align_p(p, self.align)
        elif self.config.method == "fixmatch_da":
            p = prior_align(p, self.prior, self.align.tracker_p)
        hard = one_hot(argmax_label(p), self.config.n)
        if self.config.method != "rda":
            mask = p.max(axis=1) >= self.config.tau
            if mask.any():
                hard = hard[mask]
        c = hard.sum(axis=0)
        return c / c.sum()

    def epoch_record(self, epoch) -> EpochRecord:
        ev = evaluate(self.params, self.data.test)
        self.last_eval = ev
        if self._steps_in_epoch:
            losses = {k: v / self._steps_in_epoch for k, v in self._acc.items()}
            counts = self._pseudo if self._pseudo.sum() > 0 else self._argmax
            marginal = counts / counts.sum()
        else:
            losses = dict.fromkeys(self._acc, 0.0)
            marginal = self._pseudo_marginal_on_unlabeled()
        h_exp, h_mean = prediction_entropies(self.params, self.data.unlabeled.x)
        return EpochRecord(epoch, ev.accuracy, **losses,
                           marginal_tv=float(total_variation(marginal, self.data.split.unlabeled_marginal())),
                           h_expected=h_exp, h_mean=h_mean, mi_proxy=h_exp - h_mean,
                           marginal=marginal)

    def run_epoch(self, epoch, metrics: RunMetrics | None = None) -> EpochRecord:
        self._reset_epoch()
        for _ in range(self.config.steps_per_epoch):
            out = self.step()
            if metrics is not None:
                metrics.mask_rates.append(out.mask_rate)
        return self.epoch_record(epoch)

    # checkpointing -------------------------------------------------------

    def state_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "dataset_spec": asdict(self.dataset_spec) if self.dataset_spec else None,
            "params": [_enc(a) for a in self.params.arrays()],
            "params_version": self.params.version,
            "optimizer": {"momentum_buffers": [_enc(a) for a in self.opt.momentum_buffers],
                          "momentum": self.opt.momentum, "weight_decay": self.opt.weight_decay,
                          "base_lr": self.opt.base_lr},
            "alignment": self.align.to_dict(),
            "step": self.step_count,
            "rng": self.rng.bit_generator.state,
            "samplers": {"labeled": self.labeled_sampler.to_dict(),
                         "unlabeled": self.unlabeled_sampler.to_dict()},
            "epoch_accumulators": {"losses": self._acc, "pseudo": self._pseudo.tolist(),
                                   "argmax": self._argmax.tolist(), "steps": self._steps_in_epoch},
        }

    def load_state_dict(self, state):
        if state.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a checkpoint: format={state.get('format')!r}")
        arrays = [_dec(a) for a in state["params"]]
        for dst, src in zip(self.params.arrays(), arrays):
            if dst.shape != src.shape:
                raise ConfigError("checkpoint parameter shapes do not match the model")
            dst[...] = src
        self.params.version = state["params_version"]
        o = state["optimizer"]
        self.opt = OptimizerState([_dec(a) for a in o["momentum_buffers"]], o["momentum"],
                                  o["weight_decay"], o["base_lr"])
        self.align = AlignmentState.from_dict(state["alignment"])
        self.step_count = state["step"]
        self.rng.bit_generator.state = state["rng"]
        self.labeled_sampler.load(state["samplers"]["labeled"])
        self.unlabeled_sampler.load(state["samplers"]["unlabeled"])
        acc = state["epoch_accumulators"]
        self._acc = dict(acc["losses"])
        self._pseudo = np.asarray(acc["pseudo"], dtype=np.float64)
        self._argmax = np.asarray(acc["argmax"], dtype=np.float64)
        self._steps_in_epoch = acc["steps"]


def _enc(a):
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _dec(d):
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, trainer: Trainer):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(trainer.state_dict(), fh)


def load_checkpoint(path, data: ds.Datasets | None = None) -> Trainer:
    """Rebuild a Trainer from a checkpoint.

    Data is regenerated from the stored dataset spec and seed unless given.
    """
    with open(path, encoding="utf-8") as fh:
        state = json.load(fh)
    config = TrainConfig(**state["config"])
    spec = ds.DatasetSpec(**state["dataset_spec"]) if state["dataset_spec"] else None
    if data is None:
        if spec is None:
            raise ConfigError("checkpoint has no dataset spec; pass the data explicitly")
        data = ds.build(spec, config.seed)
    trainer = Trainer(data, config, spec)
    trainer.load_state_dict(state)
    return trainer


def train(dataset_spec: ds.DatasetSpec, config: TrainConfig, data: ds.Datasets | None = None,
          on_epoch=None):
    """Run ``config.epochs`` epochs; returns ``(RunMetrics, params)``.

    Epoch 0 is the untrained model. A failing step re-raises with the
    metrics recorded so far attached as ``exc.partial_metrics``.
    """
    if data is None:
        data = ds.build(dataset_spec, config.seed)
    trainer = Trainer(data, config, dataset_spec)
    metrics = RunMetrics(config.method, config.seed, config.n, data.split.unlabeled_marginal())
    metrics.records.append(trainer.epoch_record(0))
    try:
        for epoch in range(1, config.epochs + 1):
            metrics.records.append(trainer.run_epoch(epoch, metrics))
            if on_epoch is not None:
                on_epoch(metrics.records[-1])
    except RDAError as exc:
        metrics.status = "aborted"
        metrics.error = f"{type(exc).__name__}: {exc}"
        log.error("run %s/seed %d aborted: %s", config.method, config.seed, exc)
        exc.partial_metrics = metrics
        raise
    metrics.final_eval = trainer.last_eval
    return metrics, trainer.params

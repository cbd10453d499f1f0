"""Multi-seed orchestration, metric files and the property verification suites."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import trainer as tr
from .errors import ConfigError, RDAError, UsageError, VerificationError
from .probvec import entropy, reverse, reverse_closed_form

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "RDALAB_OUTPUT_ROOT"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
BASE_COLUMNS = ["epoch", "accuracy", "loss_total", "loss_sd", "loss_sa", "loss_cd", "loss_ca",
                "marginal_tv", "h_expected", "h_mean", "mi_proxy"]
DIRICHLET_ALPHAS = (0.05, 1.0)


def default_output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class ExperimentConfig:
    dataset: ds.DatasetSpec = field(default_factory=ds.DatasetSpec)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    output_dir: Path = None
    plots: bool = False
    workers: int = 1

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("an experiment needs at least one seed")
        if self.output_dir is None:
            self.output_dir = default_output_root()
        self.output_dir = Path(self.output_dir)
        if self.train.n != self.dataset.n:
            raise ConfigError(f"dataset has n={self.dataset.n} but training config has n={self.train.n}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        # infeasible protocols fail here rather than once per seed
        ds.split_counts(self.dataset)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"dataset", "train", "seeds", "output_dir", "plots", "workers"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            dataset = ds.DatasetSpec(**d.pop("dataset", {}))
            train = dict(d.pop("train", {}))
            train.setdefault("n", dataset.n)
            return cls(dataset, tr.TrainConfig(**train), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return {"dataset": asdict(self.dataset), "train": asdict(self.train), "seeds": self.seeds,
                "output_dir": str(self.output_dir), "plots": self.plots, "workers": self.workers}


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


# -- metric files --------------------------------------------------------------

def metrics_header(n):
    return BASE_COLUMNS + [f"marginal_{i}" for i in range(n)]


def write_metrics_csv(path, metrics: tr.RunMetrics):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(metrics.n))
        for r in metrics.records:
            row = r.row()
            w.writerow([row[0]] + [format(float(v), ".17g") for v in row[1:]])


def read_metrics_csv(path):
    """Returns ``{column: np.ndarray}``; ``epoch`` is integer, the rest float64."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(header):
        if name == "epoch":
            cols[name] = np.array([int(r[j]) for r in body], dtype=np.int64)
        else:
            cols[name] = np.array([float(r[j]) for r in body], dtype=np.float64)
    return cols


def marginal_from_columns(cols, row=-1):
    names = sorted((k for k in cols if k.startswith("marginal_") and k != "marginal_tv"),
                   key=lambda k: int(k.split("_")[1]))
    return np.array([cols[k][row] for k in names])


# -- experiments ---------------------------------------------------------------

def _run_seed(dataset, train_cfg, seed, seed_dir, plots):
    """Train one seed and write its files. Never raises on training failures."""
    from .plots import emit_plots

    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    cfg = replace(train_cfg, seed=seed)
    try:
        metrics, _ = tr.train(dataset, cfg)
    except RDAError as exc:
        metrics = getattr(exc, "partial_metrics", None)
        if metrics is None:
            return {"seed": seed, "dir": seed_dir.name, "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}"}
    write_metrics_csv(seed_dir / "metrics.csv", metrics)
    out = {"seed": seed, "dir": seed_dir.name, "status": metrics.status, "error": metrics.error,
           "final_accuracy": metrics.final.accuracy, "final_marginal_tv": metrics.final.marginal_tv,
           "epochs": len(metrics.records) - 1, "min_mask_rate": min(metrics.mask_rates, default=None)}
    if plots and metrics.status == "complete":
        out["plots"] = [str(p) for p in emit_plots(metrics, seed_dir)]
    return out


def _mean_std(values):
    if not values:
        return None, None
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def run_experiment(config: ExperimentConfig):
    """Train every seed, write ``seed_<s>/metrics.csv`` and ``summary.json``; return the summary.

    Mean and std (population, so one seed gives 0) use complete seeds only.
    """
    out_dir = config.output_dir
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc

    # repeated seed values still get a directory each
    names = [f"seed_{s}" if config.seeds.count(s) == 1 else f"seed_{s}_{i}" for i, s in enumerate(config.seeds)]
    jobs = [(config.dataset, config.train, s, out_dir / d, config.plots) for s, d in zip(config.seeds, names)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            per_seed = list(pool.map(_run_seed, *zip(*jobs)))
    else:
        per_seed = [_run_seed(*j) for j in jobs]

    done = [r for r in per_seed if r["status"] == "complete"]
    acc_mean, acc_std = _mean_std([r["final_accuracy"] for r in done])
    tv_mean, tv_std = _mean_std([r["final_marginal_tv"] for r in done])
    summary = {
        "method": config.train.method,
        "protocol": config.dataset.protocol,
        "seeds": config.seeds,
        "per_seed": per_seed,
        "accuracy_mean": acc_mean,
        "accuracy_std": acc_std,
        "marginal_tv_mean": tv_mean,
        "marginal_tv_std": tv_std,
        "incomplete_seeds": [r["seed"] for r in per_seed if r["status"] != "complete"],
        "config": config.to_dict(),
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    if summary["incomplete_seeds"]:
        log.warning("incomplete seeds: %s", summary["incomplete_seeds"])
    return summary


COMPARE_COLUMNS = ["method", "accuracy_mean", "accuracy_std", "marginal_tv_mean", "marginal_tv_std",
                   "best_accuracy", "best_marginal_tv", "incomplete_seeds"]


def compare(methods, config: ExperimentConfig):
    """Run each method on the same datasets and seeds; write and return ``compare.csv`` rows.

    A row is flagged best for accuracy (highest mean) and marginal_tv (lowest
    mean). Ties flag every tied row.
    """
    methods = list(methods)
    if len(methods) < 2:
        raise UsageError("compare needs at least two methods")
    rows = []
    for i, m in enumerate(methods):
        sub = replace(config, train=replace(config.train, method=m),
                      output_dir=config.output_dir / f"{i}_{m}")
        s = run_experiment(sub)
        rows.append({"method": m, "accuracy_mean": s["accuracy_mean"], "accuracy_std": s["accuracy_std"],
                     "marginal_tv_mean": s["marginal_tv_mean"], "marginal_tv_std": s["marginal_tv_std"],
                     "incomplete_seeds": len(s["incomplete_seeds"])})
    accs = [r["accuracy_mean"] for r in rows if r["accuracy_mean"] is not None]
    tvs = [r["marginal_tv_mean"] for r in rows if r["marginal_tv_mean"] is not None]
    for r in rows:
        r["best_accuracy"] = bool(accs) and r["accuracy_mean"] == max(accs)
        r["best_marginal_tv"] = bool(tvs) and r["marginal_tv_mean"] == min(tvs)
    write_compare_csv(config.output_dir / "compare.csv", rows)
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_compare_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COMPARE_COLUMNS])


def read_compare_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = {"method": r["method"], "incomplete_seeds": int(r["incomplete_seeds"])}
        for c in ("accuracy_mean", "accuracy_std", "marginal_tv_mean", "marginal_tv_std"):
            d[c] = float(r[c]) if r[c] else None
        for c in ("best_accuracy", "best_marginal_tv"):
            d[c] = r[c] == "1"
        out.append(d)
    return out


# -- verification suites ------------------------------------------------------

def mixed_dirichlet(rng, n, size, alphas=DIRICHLET_ALPHAS):
    """Simplex samples, split evenly between the given symmetric concentrations."""
    parts = np.array_split(np.arange(size), len(alphas))
    return np.concatenate([rng.dirichlet(np.full(n, a), len(idx)) for a, idx in zip(alphas, parts)])


def entropy_gap(p):
    """``H(reverse(p)) - H(p)`` row-wise."""
    return entropy(reverse(p)) - entropy(p)


@dataclass
class GapReport:
    n: int
    trials: int
    min_gap: float
    argmin: np.ndarray
    asserted: bool


def verify_theorem1(ns=(5, 10, 26, 100), trials=100_000, seed=0, chunk=20_000):
    """Minimum of ``H(reverse(p)) - H(p)`` over mixed-Dirichlet draws for each ``n``.

    Asserts ``>= -1e-10`` for n >= 5 and ``|gap| <= 1e-12`` for n = 2. Smaller
    n in {3, 4} is reported only. Raises VerificationError naming the
    offending vector.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    reports = []
    for n in ns:
        if n < 2:
            raise UsageError("n must be >= 2")
        # n = 2 tracks the largest |gap| (should be 0), otherwise the smallest gap
        score = (lambda g: -np.abs(g)) if n == 2 else (lambda g: g)
        best, arg = np.inf, None
        left = trials
        while left:
            k = min(chunk, left)
            p = mixed_dirichlet(rng, n, k)
            s = score(entropy_gap(p))
            i = int(np.argmin(s))
            if s[i] < best:
                best, arg = float(s[i]), p[i].copy()
            left -= k
        best = -best if n == 2 else best
        rep = GapReport(n, trials, best, arg, asserted=n == 2 or n >= 5)
        if n == 2 and best > 1e-12:
            raise VerificationError(f"n=2 entropy gap {best:.3e} exceeds 1e-12", arg)
        if n >= 5 and best < -1e-10:
            raise VerificationError(f"n={n}: entropy decreased by {-best:.3e} at p={arg.tolist()}", arg)
        reports.append(rep)
    return reports


def search_entropy_counterexample(n, trials=100_000, seed=0):
    """Brute-force hunt for ``H(reverse(p)) < H(p)``; returns the worst (gap, p) found."""
    rng = np.random.default_rng(seed)
    p = mixed_dirichlet(rng, n, trials, alphas=(0.05, 0.3, 1.0, 5.0))
    gap = entropy_gap(p)
    i = int(np.argmin(gap))
    return float(gap[i]), p[i]


def _rank_signs(x):
    return np.sign(x[:, :, None] - x[:, None, :])


@dataclass
class ReverseReport:
    trials: int
    max_deviation: float
    order_violations: int
    max_involution_error: float  # n = 2 only


def verify_reverse(trials=10_000, seed=0, ns=range(2, 21), tol=1e-12):
    """Closed-form agreement and order reversal of ``reverse`` over random simplex points.

    Points come from the flat Dirichlet, with a slice of each batch given
    deliberate ties so that tie preservation is exercised too.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst, worst_q, bad, bad_q, inv = 0.0, None, 0, None, 0.0
    for n in ns:
        q = rng.dirichlet(np.ones(n), trials)
        tied = q[: trials // 10]
        tied[:, 1] = tied[:, 0]
        q[: trials // 10] = tied / tied.sum(axis=1, keepdims=True)
        r = reverse(q)
        dev = np.abs(r - reverse_closed_form(q)).max(axis=1)
        i = int(np.argmax(dev))
        if dev[i] > worst:
            worst, worst_q = float(dev[i]), q[i]
        flips = np.any(_rank_signs(q) != -_rank_signs(r), axis=(1, 2))
        if flips.any():
            bad += int(flips.sum())
            bad_q = q[int(np.argmax(flips))]
        if n == 2:
            inv = float(np.abs(reverse(r) - q).max())
    report = ReverseReport(trials, worst, bad, inv)
    if worst > tol:
        raise VerificationError(f"reverse deviates from the closed form by {worst:.3e}", worst_q)
    if bad:
        raise VerificationError(f"{bad} vectors lost their reversed rank order", bad_q)
    if inv > tol:
        raise VerificationError(f"n=2 reverse is not an involution (error {inv:.3e})")
    return report

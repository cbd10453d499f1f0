"""Command-line entry point: ``rdalab {run,compare,verify,dataset,gradcheck}``.

Exit codes: 0 success, 1 other package error, 2 bad config or usage,
3 numerical failure, 4 failed verification, 5 infeasible dataset protocol,
6 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import harness
from . import trainer as tr
from .alignment import AlignmentState
from .errors import RDAError, VerificationError
from .numerics import grad_check, init_params, jitter_biases

EXIT_IO = 6


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_experiment_flags(p):
    p.add_argument("--config", type=Path, help="JSON file mirroring ExperimentConfig fields")
    p.add_argument("--seed", type=int, nargs="+", help="seed(s); overrides the config file")
    p.add_argument("--protocol", choices=ds.PROTOCOLS)
    p.add_argument("--out", type=Path, help=f"output directory (default ${harness.OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--plots", action="store_true", help="write SVG figures per seed")
    p.add_argument("--workers", type=int, help="seeds trained in parallel processes")


def build_parser():
    ap = argparse.ArgumentParser(prog="rdalab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one method over several seeds")
    _add_experiment_flags(run)
    run.add_argument("--method", choices=tr.METHODS)

    cmp_ = sub.add_parser("compare", help="train several methods on identical data and seeds")
    _add_experiment_flags(cmp_)
    cmp_.add_argument("--method", type=_csv_list, default=["rda", "fixmatch", "fixmatch_da"],
                      help="comma-separated methods (at least two)")

    ver = sub.add_parser("verify", help="property suites for the reverse map and the entropy inequality")
    ver.add_argument("--n", type=int, nargs="+", default=[2, 5, 10, 26, 100])
    ver.add_argument("--trials", type=int, default=100_000)
    ver.add_argument("--reverse-trials", type=int, default=10_000)
    ver.add_argument("--seed", type=int, default=0)

    dat = sub.add_parser("dataset", help="print the per-class counts of a protocol")
    dat.add_argument("--config", type=Path)
    dat.add_argument("--protocol", choices=ds.PROTOCOLS)
    dat.add_argument("--seed", type=int, default=0)
    dat.add_argument("--csv", type=Path, help="also export the materialized examples here")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full RDA loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--n", type=int, default=10)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--coords", type=int, default=200)
    return ap


def experiment_config(args):
    raw = harness.load_config(args.config) if args.config else {}
    raw.setdefault("dataset", {})
    raw.setdefault("train", {})
    if args.protocol:
        raw["dataset"]["protocol"] = args.protocol
    method = getattr(args, "method", None)
    if isinstance(method, str):
        raw["train"]["method"] = method
    if args.epochs is not None:
        raw["train"]["epochs"] = args.epochs
    if args.steps_per_epoch is not None:
        raw["train"]["steps_per_epoch"] = args.steps_per_epoch
    if args.seed:
        raw["seeds"] = args.seed
    if args.out:
        raw["output_dir"] = str(args.out)
    if args.plots:
        raw["plots"] = True
    if args.workers:
        raw["workers"] = args.workers
    return harness.ExperimentConfig.from_dict(raw)


def cmd_run(args):
    s = harness.run_experiment(experiment_config(args))
    print(f"{s['method']} on {s['protocol']}: accuracy {s['accuracy_mean']} +- {s['accuracy_std']}, "
          f"marginal TV {s['marginal_tv_mean']}")
    if s["incomplete_seeds"]:
        print(f"incomplete seeds: {s['incomplete_seeds']}")
        return 1
    return 0


def cmd_compare(args):
    cfg = experiment_config(args)
    rows = harness.compare(args.method, cfg)
    for r in rows:
        flags = ("*acc" if r["best_accuracy"] else "") + (" *tv" if r["best_marginal_tv"] else "")
        print(f"{r['method']:<12} acc {r['accuracy_mean']:.4f} +- {r['accuracy_std']:.4f}  "
              f"tv {r['marginal_tv_mean']:.4f}  {flags}")
    print(f"table: {cfg.output_dir / 'compare.csv'}")
    return 0


def cmd_verify(args):
    asserted = [n for n in args.n if n == 2 or n >= 5]
    for rep in harness.verify_theorem1(asserted, args.trials, args.seed):
        what = "max |gap|" if rep.n == 2 else "min gap"
        print(f"entropy gap n={rep.n}: {what} {rep.min_gap:.3e} over {rep.trials} draws")
    for n in (n for n in args.n if n in (3, 4)):
        gap, p = harness.search_entropy_counterexample(n, args.trials, args.seed)
        print(f"entropy gap n={n} (not asserted): min {gap:.3e} at p={np.round(p, 6).tolist()}")
    r = harness.verify_reverse(args.reverse_trials, args.seed)
    print(f"reverse: max closed-form deviation {r.max_deviation:.3e}, "
          f"order violations {r.order_violations}, n=2 involution error {r.max_involution_error:.3e}")
    return 0


def cmd_dataset(args):
    raw = harness.load_config(args.config).get("dataset", {}) if args.config else {}
    if args.protocol:
        raw["protocol"] = args.protocol
    spec = ds.DatasetSpec(**raw)
    counts = ds.split_counts(spec)
    print(json.dumps({"spec": asdict(spec), "labeled_per_class": counts.labeled_per_class,
                      "unlabeled_per_class": counts.unlabeled_per_class}, indent=2))
    if args.csv:
        ds.export_csv(args.csv, ds.build(spec, args.seed))
    return 0


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    n = args.n
    params = jitter_biases(init_params(2, n, hidden=(8, 8), rng=rng, shared=False), rng)
    align = AlignmentState.empty(n)
    align.update(rng.dirichlet(np.ones(n), 4), rng.dirichlet(np.ones(n), 4))
    x, u_w, u_s = (rng.normal(size=(4, 2)) for _ in range(3))
    y = rng.integers(0, n, 4)
    y_comp = (y + rng.integers(1, n, 4)) % n
    t = tr.rda_targets(params, u_w, align)
    cfg = tr.TrainConfig(n=n)

    def loss_fn(p):
        total, _, grads = tr.rda_objective(p, x, y, y_comp, u_s, t["p_hat"], t["q_tilde"], cfg)
        return total, grads

    rep = grad_check(params, loss_fn, args.tolerance, args.coords, rng=rng)
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_coords} coordinates "
          f"(tolerance {rep.tolerance:g})")
    if not rep.passed:
        raise VerificationError("gradient check failed", rep.worst)
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "verify": cmd_verify,
            "dataset": cmd_dataset, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RDAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

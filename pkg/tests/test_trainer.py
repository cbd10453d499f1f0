import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import log_softmax as sp_log_softmax

from rdalab import datasets as ds
from rdalab import trainer as tr
from rdalab.alignment import AlignmentState, prior_align
from rdalab.errors import ConfigError, NumericalError
from rdalab.numerics import OptimizerState, grad_check, init_params, jitter_biases
from rdalab.probvec import is_probvec, total_variation


def small_cfg(**kw):
    base = dict(n=5, B=4, mu=2, epochs=2, steps_per_epoch=6, hidden=(8,), seed=3)
    base.update(kw)
    return tr.TrainConfig(**base)


def small_spec(**kw):
    base = dict(protocol="matched", n=5, D_x=20, M0=30, test_per_class=20)
    base.update(kw)
    return ds.DatasetSpec(**base)


def batches(rng, n=10, b=4, ub=8, dim=2):
    x = rng.normal(size=(b, dim))
    y = rng.integers(0, n, size=b)
    u = rng.normal(size=(ub, dim))
    return (x, y), u


def test_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(method="mixmatch")
    with pytest.raises(ConfigError):
        tr.TrainConfig(lambda_ca=-1)
    with pytest.raises(ConfigError):
        tr.TrainConfig(B=0)
    c = tr.TrainConfig(B=5, mu=3, epochs=2, steps_per_epoch=7)
    assert c.unlabeled_batch == 15 and c.total_steps == 14


def test_ce_with_logits_matches_scipy(rng):
    z = rng.normal(size=(6, 4)) * 3
    t = rng.dirichlet(np.ones(4), size=6)
    loss, grad = tr.ce_with_logits(z, t)
    assert np.allclose(loss, -(t * sp_log_softmax(z, axis=1)).sum(axis=1), atol=1e-12)
    h = 1e-6
    for i in range(4):
        dz = np.zeros_like(z)
        dz[:, i] = h
        fd = (tr.ce_with_logits(z + dz, t)[0] - tr.ce_with_logits(z - dz, t)[0]) / (2 * h)
        assert np.allclose(grad[:, i], fd, atol=1e-7)


def test_ce_with_logits_clamps_tiny_probabilities():
    loss, grad = tr.ce_with_logits(np.array([[0.0, 200.0]]), np.array([[1.0, 0.0]]))
    assert loss[0] == pytest.approx(-math.log(1e-12))
    assert np.all(grad == 0)


# -- rda_step ----------------------------------------------------------------

def test_zero_model_gives_four_ln_n(rng):
    params = init_params(2, 10, hidden=(6,), rng=1, shared=False).zeros_like()
    opt = OptimizerState.for_params(params)
    align = AlignmentState.empty(10)
    lab, u = batches(rng)
    out = tr.rda_step(params, opt, align, lab, u, tr.TrainConfig(B=4, mu=2), rng)
    for k in ("loss_sd", "loss_sa", "loss_cd", "loss_ca"):
        assert getattr(out, k) == pytest.approx(math.log(10), abs=1e-12)
    assert out.loss_total == pytest.approx(4 * math.log(10), abs=1e-12)
    # every pseudo-label is class 0 by the tie rule
    assert out.batch_pseudo_marginal[0] == 1.0
    assert out.mask_rate == 1.0


def test_zero_model_targets_are_uniform(rng):
    params = init_params(2, 10, hidden=(6,), rng=1).zeros_like()
    t = tr.rda_targets(params, rng.normal(size=(5, 2)), AlignmentState.empty(10))
    for k in ("p", "q", "p_tilde", "q_tilde"):
        assert np.allclose(t[k], 0.1, atol=1e-15)
    assert np.all(t["p_hat"] == 0)


def test_step_grows_trackers_and_keeps_them_valid(rng):
    params = init_params(2, 10, hidden=(6,), rng=2)
    opt = OptimizerState.for_params(params)
    align = AlignmentState.empty(10, capacity=3)
    cfg = tr.TrainConfig(B=4, mu=2)
    for step in range(5):
        lab, u = batches(rng)
        out = tr.rda_step(params, opt, align, lab, u, cfg, rng)
        for t in (align.tracker_p, align.tracker_q, align.tracker_p_rev, align.tracker_q_rev):
            assert len(t) == min(step + 1, 3)
            assert is_probvec(t.mean())
        recomposed = out.loss_sd + out.loss_sa + out.loss_cd + out.loss_ca
        assert abs(out.loss_total - recomposed) <= 1e-9
        assert out.mask_rate == 1.0
    assert params.version == 5


def test_zero_consistency_weights_leave_supervised_loss(rng):
    params = init_params(2, 10, hidden=(6,), rng=4)
    cfg = tr.TrainConfig(B=4, mu=2, lambda_cd=0, lambda_ca=0)
    lab, u = batches(rng)
    out = tr.rda_step(params, OptimizerState.for_params(params), AlignmentState.empty(10), lab, u, cfg,
                      np.random.default_rng(0))
    assert out.loss_total == pytest.approx(out.loss_sd + out.loss_sa, abs=1e-12)


@pytest.mark.parametrize("shared", [True, False])
def test_supervised_only_rda_and_fixmatch_share_a_trajectory(shared):
    spec = small_spec()
    data = ds.build(spec, 0)
    rda = tr.Trainer(data, small_cfg(lambda_a=0, lambda_cd=0, lambda_ca=0, shared_trunk=shared), spec)
    fm = tr.Trainer(data, small_cfg(method="fixmatch", tau=1.5, shared_trunk=shared), spec)
    for _ in range(12):
        rda.step()
        fm.step()
        for a, b in zip(rda.params.arrays(), fm.params.arrays()):
            assert np.array_equal(a, b)


@pytest.mark.parametrize("shared", [True, False])
def test_full_rda_loss_gradient(shared):
    rng = np.random.default_rng(11)
    n = 5
    params = jitter_biases(init_params(3, n, hidden=(7, 6), rng=rng, shared=shared), rng)
    align = AlignmentState.empty(n)
    for _ in range(3):
        align.update(rng.dirichlet(np.ones(n), 4), rng.dirichlet(np.ones(n), 4))
    x = rng.normal(size=(4, 3))
    y = rng.integers(0, n, 4)
    y_comp = (y + 1 + rng.integers(0, n - 1, 4)) % n
    u_w, u_s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    t = tr.rda_targets(params, u_w, align)
    cfg = tr.TrainConfig(n=n, lambda_a=0.7, lambda_cd=1.3, lambda_ca=0.9)

    def loss_fn(p):
        total, _, grads = tr.rda_objective(p, x, y, y_comp, u_s, t["p_hat"], t["q_tilde"], cfg)
        return total, grads

    rep = grad_check(params, loss_fn, tolerance=1e-4, n_coords=200, rng=0)
    assert rep.n_coords >= 200 or rep.n_coords == params.n_parameters()
    assert rep.passed, rep


def test_targets_depend_on_trackers_but_carry_no_gradient(rng):
    n = 5
    params = init_params(2, n, hidden=(6,), rng=rng)
    u = rng.normal(size=(6, 2))
    a, b = AlignmentState.empty(n), AlignmentState.empty(n)
    b.update(rng.dirichlet(np.full(n, 0.2), 8), rng.dirichlet(np.full(n, 0.2), 8))
    ta, tb = tr.rda_targets(params, u, a), tr.rda_targets(params, u, b)
    assert not np.allclose(ta["q_tilde"], tb["q_tilde"])
    assert np.array_equal(ta["p"], tb["p"])


def test_nonfinite_loss_aborts_with_snapshot(rng):
    params = init_params(2, 10, hidden=(6,), rng=4)
    params.head_d[0][:] = np.inf
    lab, u = batches(rng)
    with np.errstate(invalid="ignore"), pytest.raises(NumericalError) as ei:
        tr.rda_step(params, OptimizerState.for_params(params), AlignmentState.empty(10), lab, u,
                    tr.TrainConfig(B=4, mu=2), rng)
    assert ei.value.snapshot is not None


# -- baselines ---------------------------------------------------------------

def test_fixmatch_uniform_predictions_mask_nothing(rng):
    params = init_params(2, 10, hidden=(6,), rng=1).zeros_like()
    lab, u = batches(rng)
    out = tr.fixmatch_step(params, OptimizerState.for_params(params), lab, u, tr.TrainConfig(B=4, mu=2), rng)
    assert out.mask_rate == 0.0
    assert out.loss_cd == 0.0
    assert out.loss_total == pytest.approx(math.log(10))


def test_fixmatch_zero_threshold_uses_everything(rng):
    params = init_params(2, 10, hidden=(6,), rng=1)
    lab, u = batches(rng)
    out = tr.fixmatch_step(params, OptimizerState.for_params(params), lab, u,
                           tr.TrainConfig(B=4, mu=2, tau=0.0), rng)
    assert out.mask_rate == 1.0
    assert out.loss_cd > 0


def test_fixmatch_confident_sample_contributes_its_log_prob(rng):
    # head D reads the first input coordinate only; a large value makes class 0 certain
    params = init_params(2, 3, hidden=(), rng=1)
    params.head_d[0][:] = 0.0
    params.head_d[0][0, 0] = 1.0
    params.head_d[1][:] = 0.0
    u = np.array([[60.0, 0.0], [0.0, 0.0]])
    lab = (np.zeros((1, 2)), np.array([0]))
    cfg = tr.TrainConfig(n=3, B=1, mu=2, sigma_weak=0.0, sigma_strong=0.0, drop_prob=0.0)
    out = tr.fixmatch_step(params, OptimizerState.for_params(params), lab, u, cfg, rng)
    assert out.mask_rate == 0.5
    expected = -sp_log_softmax(np.array([60.0, 0.0, 0.0]))[0] / 2
    assert out.loss_cd == pytest.approx(expected, abs=1e-15)
    assert out.batch_pseudo_marginal.tolist() == [1.0, 0.0, 0.0]


def test_fixmatch_da_with_prior_equal_to_tracker_matches_fixmatch():
    rng = np.random.default_rng(5)
    params = init_params(2, 4, hidden=(6,), rng=rng)
    lab, u = batches(rng, n=4, ub=40)
    cfg = tr.TrainConfig(n=4, B=4, mu=10, tau=0.3)
    align = AlignmentState.empty(4)
    align.tracker_p.update(rng.dirichlet(np.ones(4), 7))
    prior = align.tracker_p.mean()
    p1, p2 = params.copy(), params.copy()
    a = tr.fixmatch_step(p1, OptimizerState.for_params(p1), lab, u, cfg, np.random.default_rng(9))
    b = tr.fixmatch_da_step(p2, OptimizerState.for_params(p2), align, prior, lab, u, cfg,
                            np.random.default_rng(9))
    assert a.mask_rate == b.mask_rate
    assert np.array_equal(a.batch_pseudo_marginal, b.batch_pseudo_marginal)
    assert a.loss_total == pytest.approx(b.loss_total, rel=1e-12)
    for x, y in zip(p1.arrays(), p2.arrays()):
        assert np.allclose(x, y, rtol=0, atol=1e-12)
    assert len(align.tracker_p) == 2


def test_balanced_prior_pulls_biased_predictions_toward_balance(rng):
    n = 4
    # predictions skewed toward class 0
    p = rng.dirichlet([8.0, 1.0, 1.0, 1.0], size=200)
    tracker = AlignmentState.empty(n).tracker_p
    tracker.update(p)
    uniform = np.full(n, 1 / n)
    aligned = prior_align(p, uniform, tracker)
    before = np.bincount(p.argmax(1), minlength=n) / 200
    after = np.bincount(aligned.argmax(1), minlength=n) / 200
    assert total_variation(after, uniform) < total_variation(before, uniform)
    assert total_variation(aligned.mean(0), uniform) < total_variation(p.mean(0), uniform)


# -- evaluate ----------------------------------------------------------------

def test_evaluate_perfect_and_constant_predictors():
    y = np.repeat(np.arange(4), 25)
    test = ds.Split(np.zeros((100, 2)), y)
    perfect = tr.evaluate(lambda x: np.eye(4)[y], test)
    assert perfect.accuracy == 1.0
    assert np.all(perfect.per_class_accuracy == 1.0)
    flat = tr.evaluate(lambda x: np.full((100, 4), 0.25), test)
    assert flat.accuracy == 0.25
    assert flat.per_class_accuracy.mean() == flat.accuracy
    assert flat.confidences.shape == (100, 2)
    with pytest.raises(ConfigError):
        tr.evaluate(lambda x: x, ds.Split(np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_random_guesser_scores_one_over_n():
    n, per_class = 10, 200
    y = np.repeat(np.arange(n), per_class)
    test = ds.Split(np.zeros((len(y), 1)), y)
    accs = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        res = tr.evaluate(lambda x: r.dirichlet(np.ones(n), len(x)), test)
        assert res.per_class_accuracy.mean() == pytest.approx(res.accuracy, abs=1e-12)
        accs.append(res.accuracy)
    # binomial sd of the mean over 20 x 2000 draws is ~0.0015
    assert abs(np.mean(accs) - 0.1) < 0.006


# -- train -------------------------------------------------------------------

def test_zero_epochs_is_initial_evaluation():
    m, _ = tr.train(small_spec(), small_cfg(epochs=0))
    assert len(m.records) == 1 and m.records[0].epoch == 0
    assert m.records[0].loss_total == 0.0
    assert m.mask_rates == []


def test_train_is_deterministic():
    for method in tr.METHODS:
        a, pa = tr.train(small_spec(), small_cfg(method=method))
        b, pb = tr.train(small_spec(), small_cfg(method=method))
        assert [r.row() for r in a.records] == [r.row() for r in b.records]
        assert all(np.array_equal(x, y) for x, y in zip(pa.arrays(), pb.arrays()))


def test_run_metrics_invariants():
    m, _ = tr.train(small_spec(protocol="mismatched_both", N0=8, gamma=5), small_cfg(epochs=3))
    assert len(m.mask_rates) == 18 and set(m.mask_rates) == {1.0}
    for r in m.records:
        assert 0 <= r.marginal_tv <= 1
        assert 0 <= r.h_mean <= r.h_expected + 1e-12 <= math.log(5) + 1e-12
        assert r.mi_proxy >= 0
        assert is_probvec(r.marginal)
    f, _ = tr.train(small_spec(), small_cfg(method="fixmatch", epochs=2))
    assert all(0 <= x <= 1 for x in f.mask_rates)


def test_separable_blobs_with_four_labels():
    spec = ds.DatasetSpec(protocol="matched", n=2, D_x=4, M0=200, radius=4.0, spread=0.5,
                          test_per_class=250)
    cfg = tr.TrainConfig(n=2, epochs=50, steps_per_epoch=16, B=4, mu=4, seed=0)
    m, _ = tr.train(spec, cfg)
    assert max(r.accuracy for r in m.records) >= 0.95
    assert m.final.accuracy >= 0.95


def test_abort_keeps_partial_metrics(monkeypatch):
    real = tr.rda_step
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 8:
            raise NumericalError("boom", {})
        return real(*a, **k)

    monkeypatch.setattr(tr, "rda_step", flaky)
    with pytest.raises(NumericalError) as ei:
        tr.train(small_spec(), small_cfg(epochs=3))
    m = ei.value.partial_metrics
    assert m.status == "aborted" and "boom" in m.error
    assert [r.epoch for r in m.records] == [0, 1]


def test_epoch_sampler_covers_everything(rng):
    s = tr.EpochSampler(10, 4)
    seen = np.concatenate([s.next(rng) for _ in range(5)])
    assert sorted(seen[:10].tolist()) == list(range(10))
    assert sorted(seen[10:20].tolist()) == list(range(10))
    with pytest.raises(ConfigError):
        tr.EpochSampler(0, 3)


@pytest.mark.parametrize("method", tr.METHODS)
def test_checkpoint_resumes_bit_exactly(tmp_path, method):
    spec = small_spec(protocol="imbalanced_labeled", N0=8)
    cfg = small_cfg(method=method, tau=0.5)
    t = tr.Trainer(ds.build(spec, cfg.seed), cfg, spec)
    for _ in range(9):
        t.step()
    path = tmp_path / "ck.json"
    tr.save_checkpoint(path, t)
    resumed = tr.load_checkpoint(path)
    for _ in range(5):
        a, b = t.step(), resumed.step()
        assert a.loss_total == b.loss_total
        assert np.array_equal(a.batch_pseudo_marginal, b.batch_pseudo_marginal)
        for x, y in zip(t.params.arrays(), resumed.params.arrays()):
            assert np.array_equal(x, y)
    assert np.array_equal(t.align.tracker_p.mean(), resumed.align.tracker_p.mean())


def test_checkpoint_rejects_foreign_documents(tmp_path):
    spec = small_spec()
    t = tr.Trainer(ds.build(spec, 0), small_cfg(), spec)
    bad = t.state_dict()
    bad["format"] = "something-else"
    with pytest.raises(ConfigError):
        t.load_state_dict(bad)
    other = replace(small_cfg(), hidden=(3,))
    with pytest.raises(ConfigError):
        tr.Trainer(ds.build(spec, 0), other, spec).load_state_dict(t.state_dict())

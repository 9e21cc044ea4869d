import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import duallabel.training as tr
from duallabel.datahub import TaskKind, gen_synthetic_classification, gen_synthetic_regression, mask_labels
from duallabel.diffcore import Tensor, backward, finite_difference, max_relative_error
from duallabel.dualtower import ConfigError, init_multitask, init_params
from duallabel.training import (
    Batch,
    LossWeights,
    TrainConfig,
    UnsupportedConfiguration,
    batch_losses,
    duality_loss,
    duality_residual,
    impute_missing,
    pretrain_multitask,
    reconstruction_losses,
    supervision_losses,
    train,
    train_mode,
    train_step,
)

from conftest import mixed_samples, tiny_config

ALL = LossWeights(1, 1, 1, 1, 0.5)


def _set_output(group, prefix, bias):
    """Make a tower emit a constant: zero the last weights, set the last bias."""
    last = max(int(k[len(prefix) + 1 :]) for k in group.keys() if k.startswith(prefix + "w"))
    group[f"{prefix}w{last}"].data[...] = 0.0
    group[f"{prefix}b{last}"].data[...] = bias


def _logit(p):
    return math.log(p / (1 - p))


def _mixed_batch(classification=False, n=12, seed=0):
    return Batch.from_samples(mixed_samples(n, 3, seed, classification))


# imputation ------------------------------------------------------------------


def test_impute_leaves_full_batch_alone(tiny_reg):
    b = Batch.from_arrays(np.ones((3, 3)), [1.0, 2, 3], [4.0, 5, 6])
    out = impute_missing(b, tiny_reg)
    assert np.array_equal(out.y1, b.y1) and np.array_equal(out.y2, b.y2)
    assert not out.imputed1.any() and not out.imputed2.any()


def test_impute_zeroed_tower_gives_half(tiny_cls):
    _set_output(tiny_cls.theta2, "tower2.", 0.0)
    b = Batch.from_arrays(np.ones((2, 3)), [1.0, 0.0], [np.nan, 1.0])
    out = impute_missing(b, tiny_cls)
    assert out.y2[0] == 0.5


def test_impute_flags_exactly_the_filled_fields(tiny_reg):
    b = _mixed_batch()
    out = impute_missing(b, tiny_reg)
    assert np.array_equal(out.imputed2, np.isin(np.arange(12), b.I_1))
    assert np.array_equal(out.imputed1, np.isin(np.arange(12), b.I_2))
    # presence sets are unchanged by imputation; I_u stays empty of values
    assert np.array_equal(out.I_1, b.I_1) and np.array_equal(out.I_2, b.I_2)
    assert np.isnan(out.y1[b.I_u]).all()


def test_losses_need_imputed_batch(tiny_reg):
    from duallabel.diffcore import ContractError

    with pytest.raises(ContractError, match="impute"):
        batch_losses(_mixed_batch(), tiny_reg, None, LossWeights())


# supervision / reconstruction --------------------------------------------------


def test_s2_hand_arithmetic(tiny_reg):
    _set_output(tiny_reg.theta2, "tower2.", 3.0)
    b = Batch.from_arrays(np.ones((1, 3)), [1.0], [5.0])
    s1, s2 = supervision_losses(b, tiny_reg, LossWeights(lambda12=1.0))
    assert s2.item() == 4.0


def test_zero_weight_silences_term(tiny_reg):
    b = Batch.from_arrays(np.ones((2, 3)), [1.0, 2.0], [5.0, 6.0])
    _, s2 = supervision_losses(b, tiny_reg, LossWeights(lambda12=0.0))
    assert s2.item() == 0.0


def test_perfect_predictors_have_zero_supervision(tiny_reg):
    _set_output(tiny_reg.theta1, "tower1.", 2.0)
    _set_output(tiny_reg.theta2, "tower2.", 7.0)
    b = Batch.from_arrays(np.random.default_rng(0).random((3, 3)), [2.0] * 3, [7.0] * 3)
    s1, s2 = supervision_losses(b, tiny_reg, LossWeights())
    assert s1.item() == 0.0 and s2.item() == 0.0


def test_reconstruction_empty_subset_and_exact_recovery(tiny_reg):
    b = impute_missing(Batch.from_arrays(np.ones((2, 3)), [np.nan, np.nan], [1.0, 2.0]), tiny_reg)
    r1, r2 = reconstruction_losses(b, tiny_reg, LossWeights())
    assert r1.item() == 0.0 and r2.item() > 0.0
    _set_output(tiny_reg.theta1, "tower1.", 4.0)
    b = impute_missing(Batch.from_arrays(np.ones((2, 3)), [4.0, 4.0], [np.nan, np.nan]), tiny_reg)
    r1, _ = reconstruction_losses(b, tiny_reg, LossWeights())
    assert r1.item() == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_losses_nonnegative(seed, cls):
    task = TaskKind.BINARY if cls else TaskKind.REGRESSION
    params = init_params(tiny_config(task, seed=seed % 97))
    mt = init_multitask(tiny_config(task, seed=seed % 89)) if cls else None
    w = ALL if cls else ALL.with_(lambda_d=0)
    b = impute_missing(_mixed_batch(cls, seed=seed), params)
    assert all(v >= 0 for v in batch_losses(b, params, mt, w).values().values())


def test_empty_subsets_give_exact_zero(tiny_cls, tiny_mt):
    only_u = Batch.from_arrays(np.ones((2, 3)), [np.nan] * 2, [np.nan] * 2)
    vals = batch_losses(impute_missing(only_u, tiny_cls), tiny_cls, tiny_mt, ALL).values()
    assert vals == dict.fromkeys(tr.TERMS, 0.0)


# duality ----------------------------------------------------------------------


def test_duality_symmetric_cancellation():
    assert duality_residual(0.3, 0.6, 0.3, 0.6).item() == 0.0


def test_duality_hand_case():
    assert abs(duality_residual(0.5, 0.8, 0.5, 0.4).item() - math.log(2) ** 2) < 1e-12


def test_duality_through_the_models(tiny_cls, tiny_mt):
    _set_output(tiny_mt.head1, "head.", 0.0)
    _set_output(tiny_mt.head2, "head.", 0.0)
    _set_output(tiny_cls.theta2, "tower2.", _logit(0.8))
    _set_output(tiny_cls.theta1, "tower1.", _logit(0.4))
    b = Batch.from_arrays(np.random.default_rng(1).random((1, 3)), [1.0], [1.0])
    d = duality_loss(b, tiny_cls, tiny_mt, LossWeights(lambda_d=1.0))
    assert abs(d.item() - math.log(2) ** 2) < 1e-12


def test_zero_duality_weight_gives_zero_and_no_gradient(tiny_cls, tiny_mt):
    b = impute_missing(_mixed_batch(True), tiny_cls)
    d = batch_losses(b, tiny_cls, tiny_mt, ALL.with_(lambda_d=0.0)).d
    assert d.item() == 0.0
    grads = backward(d, tiny_cls.groups)
    assert all(not g.any() for bucket in grads.values() for g in bucket.values())


def test_duality_rejected_for_regression(tiny_reg, tiny_mt):
    with pytest.raises(UnsupportedConfiguration):
        train(mixed_samples(8), tiny_reg, tiny_mt, TrainConfig(epochs=1, weights=ALL))


def test_duality_needs_multitask(tiny_cls):
    with pytest.raises(ConfigError):
        train(mixed_samples(8, classification=True), tiny_cls, None, TrainConfig(epochs=1, weights=ALL))


# gradient fidelity and routing -----------------------------------------------

ROUTES = {"s1": {"theta0", "theta1"}, "s2": {"theta0", "theta2"}, "r1": {"theta0", "theta1"},
          "r2": {"theta0", "theta2"}, "d": {"theta0", "theta1", "theta2"}}


# the duality term exists only for classification
@pytest.mark.parametrize("cls,term", [(False, t) for t in tr.TERMS[:4]] + [(True, t) for t in tr.TERMS])
def test_each_term_matches_finite_differences(term, cls):
    task = TaskKind.BINARY if cls else TaskKind.REGRESSION
    params = init_params(tiny_config(task, seed=11))
    mt = init_multitask(tiny_config(task, seed=12)) if cls else None
    w = ALL if cls else ALL.with_(lambda_d=0)
    b = impute_missing(_mixed_batch(cls, seed=5), params)

    def loss():
        return getattr(batch_losses(b, params, mt, w, (0.7, 0.3) if cls else None, terms=(term,)), term)

    analytic = backward(loss(), params.groups)
    numeric = finite_difference(loss, params.groups, eps=1e-5)
    assert loss().item() > 0
    assert max_relative_error(analytic, numeric) < 1e-4
    touched = {g for g, bucket in analytic.items() if any(v.any() for v in bucket.values())}
    assert touched <= ROUTES[term]


def test_s2_never_reaches_theta1_during_training(tiny_reg, monkeypatch):
    seen = []
    real = tr.backward

    def check_step(batch, params, mt, config, terms=tr.TERMS, update=("theta0", "theta1", "theta2")):
        imputed = impute_missing(batch, params)
        s2 = batch_losses(imputed, params, mt, config.weights, terms=("s2",)).s2
        seen.append(all(not g.any() for g in real(s2, params.groups)["theta1"].values()))
        return real_step(batch, params, mt, config, terms, update)

    real_step = tr.train_step
    monkeypatch.setattr(tr, "train_step", check_step)
    train(mixed_samples(12), tiny_reg, None, TrainConfig(epochs=2, batch_size=4))
    assert seen and all(seen)


# training loops ----------------------------------------------------------------


def test_train_is_deterministic(tiny_reg):
    cfg = TrainConfig(epochs=3, batch_size=3, seed=4)
    a, ha = train(mixed_samples(14), tiny_reg, None, cfg)
    b, hb = train(mixed_samples(14), tiny_reg, None, cfg)
    assert a.equals(b) and ha.rows == hb.rows


def test_train_does_not_mutate_input(tiny_reg):
    before = tiny_reg.copy()
    train(mixed_samples(8), tiny_reg, None, TrainConfig(epochs=1))
    assert tiny_reg.equals(before)


def test_train_rejects_unlabeled_set(tiny_reg):
    data = [s for s in mixed_samples(8) if s.y1 is None and s.y2 is None]
    with pytest.raises(ConfigError):
        train(data, tiny_reg, None, TrainConfig(epochs=1))


def test_history_csv(tmp_path, tiny_reg):
    _, hist = train(mixed_samples(8), tiny_reg, None, TrainConfig(epochs=2))
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,s1,s2,r1,r2,d,total" and len(lines) == 3


def test_reduction_to_supervised_mode(tiny_reg):
    data = [s for s in mixed_samples(16) if s.y1 is not None and s.y2 is not None]
    cfg = TrainConfig(epochs=3, batch_size=2, weights=LossWeights(0, 0, 1, 1, 0))
    a, _ = train(data, tiny_reg, None, cfg)
    b, _ = train_mode("a", data, tiny_reg, None, cfg)
    assert a.equals(b)


@pytest.mark.parametrize("mode,frozen", [("b1", "theta2"), ("b2", "theta1")])
def test_mode_freezing(tiny_reg, mode, frozen):
    new, _ = train_mode(mode, mixed_samples(12), tiny_reg, None, TrainConfig(epochs=1, batch_size=2))
    assert getattr(new, frozen).equals(getattr(tiny_reg, frozen))
    assert not new.theta0.equals(tiny_reg.theta0)


def test_mode_a_without_s1_leaves_theta1(tiny_reg):
    cfg = TrainConfig(epochs=1, batch_size=2, weights=LossWeights(lambda21=0.0))
    new, _ = train_mode("a", mixed_samples(12), tiny_reg, None, cfg)
    assert new.theta1.equals(tiny_reg.theta1)
    assert not new.theta2.equals(tiny_reg.theta2)


def test_mode_c_with_zero_duality_is_a_no_op(tiny_cls, tiny_mt):
    for g, p in ((tiny_cls.theta1, "tower1."), (tiny_cls.theta2, "tower2.")):
        _set_output(g, p, 0.0)
    _set_output(tiny_mt.head1, "head.", 0.0)
    _set_output(tiny_mt.head2, "head.", 0.0)
    cfg = TrainConfig(epochs=1, batch_size=2, weights=LossWeights(lambda_d=1.0))
    new, _ = train_mode("c", mixed_samples(12, classification=True), tiny_cls, tiny_mt, cfg)
    assert new.equals(tiny_cls)


def test_unknown_mode(tiny_reg):
    with pytest.raises(ConfigError):
        train_mode("z", mixed_samples(4), tiny_reg, None, TrainConfig(epochs=1))


def test_empty_mode_pool_returns_params(tiny_reg):
    data = [s for s in mixed_samples(8) if s.y1 is not None and s.y2 is not None]
    new, hist = train_mode("b1", data, tiny_reg, None, TrainConfig(epochs=1))
    assert new is tiny_reg and hist.rows == []


def test_step_updates_only_requested_groups(tiny_reg):
    b = _mixed_batch()
    new, _ = train_step(b, tiny_reg, None, TrainConfig(), update=("theta1",))
    assert new.theta0.equals(tiny_reg.theta0) and new.theta2.equals(tiny_reg.theta2)
    assert not new.theta1.equals(tiny_reg.theta1)


def test_training_loss_drops_on_synthetic_regression():
    from duallabel.datahub import MinMaxScaler
    from duallabel.dualtower import ModelConfig

    for seed in range(5):
        data, _ = gen_synthetic_regression(500, 4, seed)
        data = MinMaxScaler.fit(data).transform(mask_labels(data, 0.3, 0.3, seed))
        params = init_params(ModelConfig.default(4, TaskKind.REGRESSION, seed))
        _, hist = train(data, params, None, TrainConfig(weights=LossWeights(1, 1, 1, 1, 0), seed=seed))
        totals = hist.totals()
        # pinned from runs: the epoch-100 total is 0.0006-0.0010 of epoch 1 on seeds 0-4
        assert totals[-1] < 0.005 * totals[0]


# multi-task pretraining --------------------------------------------------------


def test_multitask_uses_every_labeled_sample(tiny_mt, monkeypatch):
    rows = []
    real = tr._mt_step

    def spy(x, y1, y2, mt, config, task):
        rows.append(len(x))
        return real(x, y1, y2, mt, config, task)

    monkeypatch.setattr(tr, "_mt_step", spy)
    data = gen_synthetic_classification(10, 3, 0)[0]
    pretrain_multitask(data, tiny_mt, TrainConfig(epochs=1, batch_size=4))
    assert sum(rows) == 10


def test_multitask_labeled_only_switch(tiny_mt, monkeypatch):
    rows = []
    real = tr._mt_step
    monkeypatch.setattr(tr, "_mt_step", lambda x, *a: rows.append(len(x)) or real(x, *a))
    data = mixed_samples(12, classification=True)
    pretrain_multitask(data, tiny_mt, TrainConfig(epochs=1, multitask_labeled_only=True))
    assert sum(rows) == 3


def test_multitask_loss_drops_and_is_deterministic():
    data = gen_synthetic_classification(200, 3, 1)[0]
    mt = init_multitask(tiny_config(TaskKind.BINARY, seed=2))
    cfg = TrainConfig(epochs=30, batch_size=4, lr=0.1)
    a, hist = pretrain_multitask(data, mt, cfg)
    b, _ = pretrain_multitask(data, mt, cfg)
    assert hist[-1] < hist[0]
    assert a.equals(b)


def test_multitask_needs_both_heads(tiny_mt):
    data = [s for s in mixed_samples(8, classification=True) if s.y2 is None]
    with pytest.raises(ConfigError, match="head 2"):
        pretrain_multitask(data, tiny_mt, TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda11=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(class_weights=(0.7,))

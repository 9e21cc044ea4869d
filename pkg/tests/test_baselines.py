import numpy as np
import pytest

import duallabel.baselines as bl
from duallabel.baselines import COMPONENTS, BaselineConfig, BaselineKind, baseline_fit, baseline_predict, predict_arrays
from duallabel.datahub import PresenceMask, Sample, TaskKind, gen_synthetic_classification, gen_synthetic_regression, mask_labels
from duallabel.diffcore import ContractError
from duallabel.dualtower import ConfigError
from duallabel.training import TrainConfig

CFG = BaselineConfig(TrainConfig(epochs=3, batch_size=4, seed=1), hidden=(6, 4))


@pytest.fixture(scope="module")
def reg_data():
    data, _ = gen_synthetic_regression(60, 3, 0)
    return mask_labels(data, 0.3, 0.3, 0)


@pytest.fixture(scope="module")
def fitted(reg_data):
    return {k.value: baseline_fit(k, reg_data, TaskKind.REGRESSION, CFG) for k in BaselineKind}


def test_component_counts(fitted):
    for kind, pred in fitted.items():
        assert pred.n_components == COMPONENTS[kind]
    assert fitted["DSML_REV"].swapped and not fitted["DSML"].swapped


def test_id_on_full_data_uses_all_samples():
    data, _ = gen_synthetic_regression(30, 3, 1)
    pred = baseline_fit("ID", data, "regression", CFG)
    assert pred.models["M1"].n_fit == 30 and pred.models["M2"].n_fit == 30


def test_col_equals_ssl_first_stage(fitted):
    assert fitted["COL"].models["M"].params.equals(fitted["SSL"].models["M1"].params)


def test_stage_subsets(reg_data, fitted):
    from duallabel.datahub import partition

    p = partition(reg_data)
    nl, n1, n2 = len(p.I_l), len(p.I_1), len(p.I_2)
    ls = fitted["LS"].models
    assert ls["M1"].n_fit == nl + n2 and ls["M2"].n_fit == nl + n1
    ds = fitted["DSML"].models
    assert (ds["M1"].n_fit, ds["M2"].n_fit, ds["M3"].n_fit) == (nl + n2, nl + n1, nl + n1 + n2)
    rv = fitted["DSML_REV"].models
    assert (rv["M1"].n_fit, rv["M2"].n_fit) == (nl + n1, nl + n2)
    assert fitted["COL"].models["M"].n_fit == nl


def test_deterministic(reg_data, fitted):
    again = baseline_fit("DSML", reg_data, "regression", CFG)
    for k in ("M1", "M2", "M3"):
        assert again.models[k].params.equals(fitted["DSML"].models[k].params)


def test_id_single_equals_double(fitted):
    x = np.random.default_rng(0).random((5, 3))
    y = np.full(5, 2.0)
    d1, d2 = predict_arrays(fitted["ID"], x)
    s1, _ = predict_arrays(fitted["ID"], x, y2=y)
    _, s2 = predict_arrays(fitted["ID"], x, y1=y)
    assert np.array_equal(d1, s1) and np.array_equal(d2, s2)


@pytest.mark.parametrize("kind", ["ID", "COL", "SSL"])
def test_marginal_schemes_ignore_label_values(fitted, kind):
    x = np.random.default_rng(1).random((4, 3))
    a, _ = predict_arrays(fitted[kind], x, y2=np.zeros(4))
    b, _ = predict_arrays(fitted[kind], x, y2=np.full(4, 9.0))
    assert np.array_equal(a, b)


def test_ls_double_chain(fitted):
    m = fitted["LS"].models
    x = np.random.default_rng(2).random((4, 3))
    p1, p2 = predict_arrays(fitted["LS"], x)
    assert np.array_equal(p2, m["M1"](x)[:, 0])
    assert np.array_equal(p1, m["M2"](x, p2)[:, 0])


def test_dsml_single_y2_uses_third_stage(fitted):
    m = fitted["DSML"].models
    x = np.random.default_rng(3).random((4, 3))
    y1 = np.array([1.5, 2.0, 2.5, 3.0])
    _, p2 = predict_arrays(fitted["DSML"], x, y1=y1)
    assert np.array_equal(p2, m["M3"](x, y1)[:, 0])


def test_dsml_rev_swaps_roles(fitted):
    m = fitted["DSML_REV"].models
    x = np.random.default_rng(4).random((3, 3))
    y2 = np.array([1.2, 1.4, 1.6])
    p1, p2 = predict_arrays(fitted["DSML_REV"], x, y2=y2)
    assert p2 is None and np.array_equal(p1, m["M3"](x, y2)[:, 0])


def test_label_reads_counted_only_for_single_tasks(fitted):
    pred = fitted["DSML"]
    before = pred.label_reads
    predict_arrays(pred, np.ones((3, 3)))
    assert pred.label_reads == before
    predict_arrays(pred, np.ones((3, 3)), y1=np.ones(3))
    assert pred.label_reads == before + 3


def test_baseline_predict_per_sample(fitted):
    s = Sample(np.ones(3), 2.0, None)
    out = baseline_predict(fitted["LS"], s, PresenceMask(1, 0))
    assert list(out) == [2]
    out = baseline_predict(fitted["LS"], Sample(np.ones(3)), PresenceMask(0, 0))
    assert sorted(out) == [1, 2]
    with pytest.raises(ContractError):
        baseline_predict(fitted["LS"], Sample(np.ones(3), 1.0, 1.0), PresenceMask(1, 1))


def test_classification_outputs_are_probabilities():
    data = mask_labels(gen_synthetic_classification(40, 3, 0)[0], 0.3, 0.3, 0)
    for kind in BaselineKind:
        p1, p2 = predict_arrays(baseline_fit(kind, data, TaskKind.BINARY, CFG), np.random.default_rng(0).random((5, 3)))
        assert ((p1 >= 0) & (p1 <= 1)).all() and ((p2 >= 0) & (p2 <= 1)).all()


def test_stage_without_data_is_a_config_error():
    data = [Sample(np.ones(3) * i, 1.0, None) for i in range(4)]
    with pytest.raises(ConfigError):
        baseline_fit("ID", data, "regression", CFG)
    with pytest.raises(ConfigError):
        baseline_fit("COL", data, "regression", CFG)


def test_fit_counts_gradient_contributors():
    x = np.random.default_rng(0).random((10, 3))
    t = np.column_stack([np.r_[np.ones(6), [np.nan] * 4], np.r_[[np.nan] * 2, np.ones(8)]])
    m = bl.fit_mlp("probe", x, t, TaskKind.REGRESSION, CFG)
    assert m.n_fit == 10
    t[:, 1] = np.nan
    t[6:, 0] = np.nan
    assert bl.fit_mlp("probe", x, t, TaskKind.REGRESSION, CFG).n_fit == 6

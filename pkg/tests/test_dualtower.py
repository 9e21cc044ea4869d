import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from duallabel.datahub import TaskKind
from duallabel.diffcore import Tensor, backward
from duallabel.dualtower import (
    ConfigError,
    ModelConfig,
    f_forward,
    g_forward,
    init_multitask,
    init_params,
    load_checkpoint,
    m_forward,
    save_checkpoint,
)

from conftest import tiny_config


def _zero_last(group, prefix):
    last = max(int(k[len(prefix) + 1 :]) for k in group.keys() if k.startswith(prefix + "w"))
    group[f"{prefix}w{last}"].data[...] = 0.0
    group[f"{prefix}b{last}"].data[...] = 0.0


def test_default_widths():
    cfg = ModelConfig.default(10)
    assert cfg.encoder_widths == (10, 32, 16)
    assert cfg.embed_widths == (1, 8)
    assert cfg.tower_widths == (24, 16, 1)


def test_widths_must_compose():
    with pytest.raises(ConfigError, match="compose"):
        ModelConfig((4, 8), (1, 3), (10, 1))
    with pytest.raises(ConfigError):
        ModelConfig((4, 8), (2, 3), (11, 1))


def test_init_groups_disjoint_and_seeded():
    a = init_params(tiny_config(seed=1))
    keys = [set(g.keys()) for g in a.groups]
    assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
    assert a.equals(init_params(tiny_config(seed=1)))
    assert not a.equals(init_params(tiny_config(seed=2)))


@settings(max_examples=25, deadline=None)
@given(arrays(float, (5, 3), elements=st.floats(-10, 10)), arrays(float, 5, elements=st.floats(-10, 10)))
def test_classification_outputs_are_probabilities(x, y):
    params = init_params(tiny_config(TaskKind.BINARY, seed=9))
    for out in (f_forward(x, y, params), g_forward(x, y, params)):
        assert out.shape == (5,)
        assert ((out.data > 0) & (out.data < 1)).all()


def test_forward_deterministic(tiny_reg):
    x = np.linspace(0, 1, 6).reshape(2, 3)
    assert np.array_equal(f_forward(x, [1.0, 2.0], tiny_reg).data, f_forward(x, [1.0, 2.0], tiny_reg).data)
    assert np.array_equal(g_forward(x, [1.0, 2.0], tiny_reg).data, g_forward(x, [1.0, 2.0], tiny_reg).data)


@pytest.mark.parametrize("task,expected", [(TaskKind.BINARY, 0.5), (TaskKind.REGRESSION, 0.0)])
def test_zeroed_output_layer(task, expected):
    params = init_params(tiny_config(task, seed=0))
    _zero_last(params.theta2, "tower2.")
    _zero_last(params.theta1, "tower1.")
    x = np.random.default_rng(0).random((3, 3))
    assert f_forward(x, [0.0, 1.0, 0.3], params).data.tolist() == [expected] * 3
    assert g_forward(x, [0.0, 1.0, 0.3], params).data.tolist() == [expected] * 3


def test_swapping_theta2_leaves_g_unchanged(tiny_reg):
    x = np.random.default_rng(1).random((4, 3))
    before = g_forward(x, np.ones(4), tiny_reg).data
    other = init_params(tiny_config(seed=77))
    tiny_reg.theta2 = other.theta2
    assert np.array_equal(g_forward(x, np.ones(4), tiny_reg).data, before)


def test_parameter_partition_in_gradients(tiny_reg):
    x = np.random.default_rng(2).random((4, 3))
    gg = backward(g_forward(x, np.ones(4), tiny_reg).sum(), tiny_reg.groups)
    gf = backward(f_forward(x, np.ones(4), tiny_reg).sum(), tiny_reg.groups)
    assert all(not v.any() for v in gg["theta2"].values())
    assert all(not v.any() for v in gf["theta1"].values())
    # the shared encoder feeds both towers
    assert any(v.any() for v in gg["theta0"].values())
    assert any(v.any() for v in gf["theta0"].values())


def test_round_trip_composition_is_well_typed(tiny_cls):
    x = np.random.default_rng(3).random((5, 3))
    y2 = f_forward(x, np.array([0, 1, 1, 0, 1.0]), tiny_cls)
    y1 = g_forward(x, y2, tiny_cls)
    assert y1.shape == (5,) and np.isfinite(y1.data).all()


def test_multitask_zeroed_heads_give_half():
    mt = init_multitask(tiny_config(TaskKind.BINARY, seed=1))
    _zero_last(mt.head1, "head.")
    _zero_last(mt.head2, "head.")
    p1, p2 = m_forward(np.ones((2, 3)), mt)
    assert p1.data.tolist() == [0.5, 0.5] and p2.data.tolist() == [0.5, 0.5]


def test_multitask_deterministic_and_finite(tiny_mt):
    x = np.random.default_rng(4).random((6, 3)) * 100
    a = m_forward(x, tiny_mt)
    b = m_forward(x, tiny_mt)
    assert np.array_equal(a[0].data, b[0].data) and np.isfinite(a[1].data).all()


def test_single_sample_input(tiny_reg):
    out = f_forward(np.ones(3), 1.5, tiny_reg)
    assert out.shape == (1,)


def test_checkpoint_round_trip(tmp_path, tiny_cls, tiny_mt):
    for obj in (tiny_cls, tiny_mt):
        p = tmp_path / "ck.npz"
        save_checkpoint(p, obj)
        back = load_checkpoint(p)
        assert type(back) is type(obj) and back.equals(obj) and back.config == obj.config


def test_feeding_a_tensor_label(tiny_reg):
    x = np.zeros((2, 3))
    assert np.array_equal(f_forward(x, Tensor([1.0, 2.0]), tiny_reg).data, f_forward(x, [1.0, 2.0], tiny_reg).data)

import numpy as np
import pytest

from duallabel.datahub import Sample, TaskKind
from duallabel.dualtower import ModelConfig, init_multitask, init_params


def tiny_config(task=TaskKind.REGRESSION, seed=0, d=3, act="tanh"):
    """Widths <= 8 so finite differences stay cheap."""
    return ModelConfig((d, 5, 4), (1, 3), (7, 4, 1), task, seed, act)


@pytest.fixture
def tiny_reg():
    return init_params(tiny_config(TaskKind.REGRESSION, seed=3))


@pytest.fixture
def tiny_cls():
    return init_params(tiny_config(TaskKind.BINARY, seed=4))


@pytest.fixture
def tiny_mt():
    return init_multitask(tiny_config(TaskKind.BINARY, seed=5))


def mixed_samples(n=12, d=3, seed=0, classification=False):
    """Samples cycling through the four presence patterns."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.random(d)
        if classification:
            y1, y2 = float(rng.random() < 0.5), float(rng.random() < 0.5)
        else:
            y1, y2 = 1.0 + rng.random(), 1.0 + rng.random()
        pattern = i % 4
        out.append(Sample(x, y1 if pattern in (0, 1) else None, y2 if pattern in (0, 2) else None))
    return out

import numpy as np
import pytest

from dmatlab.manifold import DatasetConfig, build_dataset
from dmatlab.models import (
    DEFAULT_GENERATOR_SEED,
    DEFAULT_TEACHER_SEED,
    make_generator,
    make_teacher,
)
from dmatlab.training import TrainConfig, train


@pytest.fixture(scope="session")
def generator():
    return make_generator(DEFAULT_GENERATOR_SEED)


@pytest.fixture(scope="session")
def teacher(generator):
    return make_teacher(DEFAULT_TEACHER_SEED, generator)


@pytest.fixture(scope="session")
def small_data(generator, teacher):
    """600/200 samples: big enough for meaningful accuracies, fast to build."""
    cfg = DatasetConfig(n_train=600, n_test=200, seed=0)
    train_set, test_set = build_dataset(cfg, generator, teacher)
    return cfg, train_set, test_set


@pytest.fixture(scope="session")
def trained_small(small_data, generator):
    """Quick 8-epoch models for attack/eval tests (normal and at regimes)."""
    _, train_set, test_set = small_data
    models = {}
    for regime in ("normal", "at"):
        cfg = TrainConfig(regime=regime, epochs=8, batch_size=64, seed=0)
        models[regime] = train((train_set, test_set), cfg, generator).final
    return models


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest

from trajpoison.predictor import PredictorConfig, TrainHyper, encode_scene, train
from trajpoison.scene import SceneGenConfig, compute_dataset_stats, generate_dataset


@pytest.fixture(scope="session")
def scenes():
    return generate_dataset(SceneGenConfig(num_scenes=60), seed=3)


@pytest.fixture(scope="session")
def stats(scenes):
    return compute_dataset_stats(scenes)


@pytest.fixture(scope="session")
def small_config():
    return PredictorConfig(hidden_sizes=(12, 8), max_agents=6)


@pytest.fixture(scope="session")
def trained(scenes, small_config):
    data = [(encode_scene(s, small_config), s.target.fut) for s in scenes]
    return train(small_config, data, TrainHyper(lr=0.005, epochs=15, batch=16)).params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

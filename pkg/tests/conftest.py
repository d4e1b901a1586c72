import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from ada import AdaConfig  # noqa: E402
from data_pipeline import PreprocessSpec, synth_toy_dataset  # noqa: E402
from encoders import ToyEncoderPair  # noqa: E402
from trainer import TrainConfig  # noqa: E402
from utils import ConfigManager  # noqa: E402


@pytest.fixture(autouse=True)
def reset_config():
    ConfigManager._instance = None
    yield
    ConfigManager._instance = None


@pytest.fixture(scope='session')
def toy_encoder():
    return ToyEncoderPair(seed=0)


@pytest.fixture(scope='session')
def toy_spec():
    return PreprocessSpec(size=16, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))


@pytest.fixture(scope='session')
def toy_datasets(tmp_path_factory):
    """(non-target, target) handles of a well separated toy task, 60 images each."""
    root = tmp_path_factory.mktemp('toy')
    return synth_toy_dataset(60, separation=4.0, dim=(16, 16), seed=0, root=str(root))


@pytest.fixture
def fast_train_cfg():
    """Schedule sized for the toy encoder: larger rates, fewer epochs."""
    def make(**overrides):
        settings = dict(epochs=60, base_lr=0.2, warm_lr=0.02, warm_epochs=1, shots=10, seed=0,
                        ada=AdaConfig(epsilon=0.1, mode='non_target', proportion=0.5, mask_seed=0))
        settings.update(overrides)
        return TrainConfig(**settings)
    return make

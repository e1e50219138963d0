import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import gradcore as gc  # noqa: E402
from data import gen_synthetic  # noqa: E402
from models import ArchSpec, GenSpec, LossWeights, TrainConfig  # noqa: E402

TINY_ARCH = dict(encoder_channels=[4, 8], decoder_channels=[8, 4], projection_dim=8, groups=2)


@pytest.fixture
def f64():
    with gc.float_mode("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return ArchSpec(**TINY_ARCH)


@pytest.fixture(scope="session")
def tiny_data():
    """Two classes, 10 samples each, 8x8; split 14/3/3"""
    with gc.float_mode("f32"):
        return gen_synthetic(GenSpec(classes=2, per_class=10, size=8, seed=3, deform_amplitude=1.0))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        eta0=1e-3, epochs_corld=1, epochs_clf=1, batch_size=4, seed=0,
        weights=LossWeights(sigma=0.1, weight_decay=0.0),
    )

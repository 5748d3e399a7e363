import numpy as np
import pytest

from config import MICRO_MODEL, ModelConfig, SynthConfig
from data_generator import generate
from model import AdaFocusModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return MICRO_MODEL


@pytest.fixture
def micro_model(micro_config):
    return AdaFocusModel(micro_config, seed=3)


@pytest.fixture
def micro_batch(micro_config):
    c = micro_config
    videos = np.random.default_rng(5).normal(size=(2, c.T0, c.C, c.H, c.W))
    return videos, np.array([0, 1])


@pytest.fixture
def small_synth():
    return SynthConfig(T0=8, H=16, W=16, num_classes=4, glyph_min=5, glyph_max=6,
                       informative_frames=3, drift=1.0, seed=11)


@pytest.fixture
def small_dataset(small_synth):
    return generate(small_synth, 12)


@pytest.fixture
def small_model_config(small_synth):
    s = small_synth
    return ModelConfig(T0=s.T0, T_G=4, T_L=2, H=s.H, W=s.W, C=s.C, P=8, M=8, num_classes=s.num_classes,
                       global_widths=(4, 8), local_widths=(4, 8), policy_channels=4, policy_hidden=8)

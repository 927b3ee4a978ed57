import numpy as np
import pytest
import torch

from eventgrounder.data import SyntheticConfig, generate_synthetic, load_dataset
from eventgrounder.model import ModelConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return ModelConfig(video_dim=6, text_dim=5, d_model=8, num_heads=2, enc_layers=2, dec_layers=2,
                       num_queries=3, slot_iters=2, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_config):
    model = build_model(tiny_config, seed=0)
    model.eval()
    return model


def random_batch(config, batch=2, num_frames=12, num_tokens=4, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return {
        "video": torch.randn(batch, num_frames, config.video_dim, generator=g, dtype=dtype),
        "video_mask": torch.ones(batch, num_frames, dtype=torch.bool),
        "text": torch.randn(batch, num_tokens, config.text_dim, generator=g, dtype=dtype),
        "text_mask": torch.ones(batch, num_tokens, dtype=torch.bool),
    }


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(SyntheticConfig(num_samples=24, num_frames=20, feature_dim=8, num_events_range=(2, 4),
                                       noise_sigma=0.05, seed=11), out)
    return out


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    return list(load_dataset(small_dataset))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])

import logging

import pytest

from rho_vae import data_io
from rho_vae.trainer import TrainConfig

ENV_VARS = ("RHOVAE_DATA_DIR", "RHOVAE_OUT_DIR", "RHOVAE_LOG_LEVEL", "RHOVAE_LOG_FORMAT")


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    """Keep RHOVAE_* variables and log handlers from leaking between tests."""
    for name in ENV_VARS:
        # setenv first so the variable is removed again at teardown even if a
        # .env file loaded during the test sets it.
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)
    monkeypatch.chdir(tmp_path)
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if handler.get_name() == "rho_vae":
            root.removeHandler(handler)


@pytest.fixture
def tiny_splits():
    return data_io.synth_splits(train_count=24, test_count=8, side=4, rho_pix=0.8, seed=3)


@pytest.fixture
def tiny_config():
    return TrainConfig(latent_dim=3, hidden_dim=6, epochs=2, batch_size=8, lr=1e-2, seed=5)

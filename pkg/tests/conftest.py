import os

# Environment seen by config.config at import time
os.environ["IMPUTAD_LOG_TO_FILE"] = "false"
os.environ["IMPUTAD_JSON_LOGS"] = "false"
os.environ.pop("IMPUTAD_CHECKPOINT", None)

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from config.experiment import load_config  # noqa: E402
from imputad.dataset import RawSeries, fit_normalizer  # noqa: E402
from imputad.denoiser import DenoiserConfig, build_denoiser  # noqa: E402
from imputad.detector import EnsembleConfig  # noqa: E402
from imputad.diffusion import build_schedule  # noqa: E402
from tasks.synthetic import make_synthetic_dataset  # noqa: E402

TINY_T = 5
TINY_WINDOW = 20


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_denoiser_config(**changes) -> DenoiserConfig:
    values = dict(n_blocks=1, hidden_dim=16, n_heads=2, step_embed_dim=16, time_embed_dim=16,
                  feature_embed_dim=4, ff_dim=16, T=TINY_T)
    values.update(changes)
    return DenoiserConfig(**values)


def tiny_overrides(dataset_path: str, out_dir: str) -> dict:
    return {
        "seeds": [0],
        "out_dir": out_dir,
        "inference_batch_size": 4,
        "dataset": {"path": dataset_path, "window": TINY_WINDOW},
        "schedule": {"T": TINY_T},
        "denoiser": tiny_denoiser_config().model_dump(),
        "train": {"epochs": 1, "batch_size": 4},
        "ensemble": {"xi": 2, "vote_steps": [4, 3, 2, 1]},
    }


@pytest.fixture
def schedule():
    return build_schedule(T=TINY_T)


@pytest.fixture
def tiny_model():
    return build_denoiser(tiny_denoiser_config(), n_features=2, seed=0)


@pytest.fixture
def tiny_ensemble():
    return EnsembleConfig(xi=2, vote_steps=[4, 3, 2, 1])


@pytest.fixture
def small_series():
    rng = np.random.default_rng(7)
    t = np.arange(60)[:, None]
    values = np.sin(2 * np.pi * t / np.array([15.0, 25.0])) + 0.05 * rng.standard_normal((60, 2))
    labels = np.zeros(60, dtype=np.int64)
    labels[30:35] = 1
    return RawSeries(values=values, labels=labels, name="small")


@pytest.fixture
def small_stats(small_series):
    return fit_normalizer(small_series)


@pytest.fixture
def synthetic_dir(tmp_path):
    return make_synthetic_dataset(str(tmp_path / "synth"), n_features=2, train_len=200, test_len=160, n_events=4, seed=0)


@pytest.fixture
def tiny_cfg(synthetic_dir, tmp_path):
    return load_config(None, environ={}, overrides=tiny_overrides(synthetic_dir, str(tmp_path / "runs")))

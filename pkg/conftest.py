"""Global pytest fixtures"""

from pathlib import Path

import numpy as np
import pytest
from dotenv import load_dotenv

from support.dyngroup.generator import GenConfig, sample_dataset
from support.dyngroup.model import ModelParams, random_params

ROOT = Path(__file__).resolve().parent
FIXTURES_DIR = ROOT / "fixtures"

# Local overrides such as DYNGROUP_THREADS; never overwrite the caller's environment.
load_dotenv(ROOT / ".env", override=False)


@pytest.fixture(autouse=True)
def quiet_progress(request: pytest.FixtureRequest, monkeypatch: pytest.MonkeyPatch):
    if request.node.get_closest_marker("verbose_progress") is None:
        monkeypatch.setenv("DYNGROUP_PROGRESS", "0")
    monkeypatch.delenv("DYNGROUP_FILTER_TRACE", raising=False)
    yield


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES_DIR


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def small_params() -> ModelParams:
    """Two groups with two states each over 3 x 3 slices and two sources."""
    return random_params(K=3, N=3, I=2, state_counts=(2, 2), rng=np.random.default_rng(7))


@pytest.fixture
def small_dataset(small_params: ModelParams):
    cfg = GenConfig(params=small_params, T=10, fixed_n=300, seed=11)
    return sample_dataset(cfg)

from pathlib import Path

import numpy as np
import pytest

from src.config import OUTPUT_ROOT_ENV
from src.state import TrainConfig


@pytest.fixture(autouse=True)
def output_root(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Every relative output_dir lands in the test's tmp dir."""
    root = tmp_path / "runs"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(root))
    return root


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TrainConfig(batch_size=8, epochs=2, n1=4, n2=5, neg_samples=3, seed=0)

from typing import List

import numpy as np

from src.config import build_experiment_config
from src.state import ExperimentConfig, Session


def random_sessions(rng: np.random.Generator, n: int, n_x: int, max_len: int = 6) -> List[Session]:
    return [rng.integers(0, n_x, size=int(rng.integers(2, max_len + 1))).tolist() for _ in range(n)]


def small_experiment(**overrides) -> ExperimentConfig:
    """A synthetic experiment that trains in well under a second per job."""
    base = {
        "name": "small",
        "fractions": [0.5, 1.0],
        "seeds": [0],
        "plots": False,
        "train": {"epochs": 1, "batch_size": 16, "n1": 4, "n2": 6, "neg_samples": 5},
        "markov": {"n_walks": 20},
        "similarity": {"n_centroid": 30},
        "markets": [
            {"market_id": "m1", "synthetic": {"n_x": 20, "n_sessions": 220, "temperature": 0.3, "seed": 1}},
        ],
    }
    base.update(overrides)
    return build_experiment_config(base)

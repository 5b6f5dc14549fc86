import numpy as np
import pytest

from sgmpc.config import ExperimentConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(**overrides) -> ExperimentConfig:
    """Short-horizon experiment used by the harness and CLI tests."""
    base = {"n_trajectories": 2, "controllers": ["ours"], "plant": {"T": 20},
            "grading": {"iou_samples": 20000}}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return ExperimentConfig.model_validate(base)

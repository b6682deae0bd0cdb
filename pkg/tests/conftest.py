import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_model():
    from octaseg.backbone import build_model

    return build_model("tiny", seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def vessel_samples():
    from octaseg.fixtures import make_sample

    rng = np.random.default_rng(0)
    return [make_sample(f"{i:02d}", 64, rng, tasks=("RV", "FAZ")) for i in range(4)]


def random_mask(rng: np.random.Generator, h: int, w: int, density: float = 0.35) -> np.ndarray:
    return (rng.random((h, w)) < density).astype(np.uint8)

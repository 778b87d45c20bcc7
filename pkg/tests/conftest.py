import numpy as np
import pytest

from otflow.core import JointDataset, RngState
from otflow.problems import banana_joint_sample


@pytest.fixture
def rng():
    return np.random.default_rng(202)


@pytest.fixture
def banana_small():
    """200 banana rows, enough for smoke fits without slowing the suite."""
    return banana_joint_sample(200, np.random.default_rng(5))


@pytest.fixture
def tiny_joint():
    pairs = np.array(
        [
            [0.0, 1.0],
            [1.0, -1.0],
            [2.0, 0.5],
            [3.0, -0.5],
            [4.0, 0.0],
            [5.0, 2.0],
        ]
    )
    return JointDataset(pairs, 1, 1, seed=0)


@pytest.fixture
def state():
    return RngState(918273)

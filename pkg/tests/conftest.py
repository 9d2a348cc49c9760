import numpy as np
import pytest
import torch

from graspfit.geometry import CameraIntrinsics
from graspfit.hand import build_test_hand
from graspfit.shapes import box, icosphere

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def hand_model():
    return build_test_hand(seed=0, side="right")


@pytest.fixture(scope="session")
def cube_mesh():
    return box((0.08, 0.08, 0.08))


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(0.05, 3)


@pytest.fixture(scope="session")
def camera():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0,
                            width=640, height=480)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

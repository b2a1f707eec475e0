import numpy as np
import pytest

from handlab import datasetio, fitting, model


@pytest.fixture(scope="session")
def hand_model():
    return model.synth_model(1, 778)


@pytest.fixture(scope="session")
def small_model():
    return model.synth_model(3, 240)


@pytest.fixture(scope="session")
def rig():
    return datasetio.build_cube_rig(edge=1.0, image_size=128)


@pytest.fixture(scope="session")
def small_rig():
    return datasetio.build_cube_rig(edge=1.0, image_size=32)


@pytest.fixture(scope="session")
def pose_library():
    return fitting.PoseLibrary.generate(0, 256)


def random_params(m, seed, shape_std=0.5):
    rng = np.random.default_rng(seed)
    return datasetio.random_hand_params(m, rng, shape_std=shape_std)

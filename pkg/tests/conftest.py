import numpy as np
import pytest

from manikey.synthrig import calibration_error, default_rig, make_dataset, synthesize_sample


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def quadruped_sample(rig):
    err = calibration_error(rig.n_cameras, np.radians(1.0), 0.005, np.random.default_rng(99))
    return synthesize_sample(0, "train", 0, rig, err)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_dataset")
    make_dataset(root, 6, 3, seed=3)
    return root

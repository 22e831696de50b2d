import numpy as np
import pytest

from ldrf.dataio import generate_dataset
from ldrf.synthetic import SceneConfig, build_scene


TINY = SceneConfig(width=48, height=36, frames=6, seed=11)


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    """A small corridor dataset shared by the trainer and CLI tests."""
    out = tmp_path_factory.mktemp("tiny_scene")
    generate_dataset(build_scene(TINY), out)
    return out


@pytest.fixture(scope="session")
def noiseless_scene_dir(tmp_path_factory):
    """Same layout with exact Lidar ranges, for reprojection identities."""
    out = tmp_path_factory.mktemp("noiseless_scene")
    cfg = SceneConfig(width=48, height=36, frames=4, seed=11, lidar_noise=0.0)
    generate_dataset(build_scene(cfg), out)
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)

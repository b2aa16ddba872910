import numpy as np
import pytest

from lanemap import pipeline, synth
from lanemap.roadmodel import BoundaryLine


@pytest.fixture(scope="session")
def train_scene():
    return synth.generate_scene(synth.SceneSpec(length=250.0, seed=7))


@pytest.fixture(scope="session")
def trained(train_scene):
    """Default forest on the training scene, with its balanced training set."""
    return pipeline.train_from_tiles(train_scene.tiles, train_scene.painted, train_scene.surface)


@pytest.fixture(scope="session")
def forest(trained):
    return trained[0]


@pytest.fixture(scope="session")
def highway():
    """1 km, 3-lane clean scene, distinct seed from the training scene."""
    return synth.generate_scene(synth.SceneSpec(length=1000.0, seed=1))


@pytest.fixture(scope="session")
def short_scene():
    return synth.generate_scene(synth.SceneSpec(length=120.0, seed=3))


def route_of(model):
    traj = model.chunks[0].trajectory
    return BoundaryLine.from_array(traj.line_id, "trajectory", model.trajectory_latlon())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import numpy as np
import pytest

from contactloc.harness import default_assets
from contactloc.kinematics import ChainModel, RevoluteJoint


# coarse meshes keep the unit tests fast; acceptance uses the default scale
TEST_EDGE = 0.016
TEST_K = 32


@pytest.fixture(scope="session")
def assets():
    return default_assets(TEST_EDGE, TEST_K)


@pytest.fixture(scope="session")
def chain(assets):
    return assets.chain


@pytest.fixture(scope="session")
def surfaces(assets):
    return assets.surfaces


@pytest.fixture(scope="session")
def tables(assets):
    return assets.tables


def make_planar_chain(lengths=(1.0, 1.0), masses=None, point_masses=True):
    """Planar chain in the xy plane: all axes +z, links along +x."""
    joints = []
    prev = 0.0
    for i, length in enumerate(lengths):
        mass = 0.0 if masses is None else masses[i]
        inertia = np.zeros((3, 3))
        joints.append(
            RevoluteJoint(
                axis=np.array([0.0, 0.0, 1.0]),
                origin_pos=np.array([prev, 0.0, 0.0]),
                origin_rot=np.eye(3),
                mass=mass,
                com=np.array([length, 0.0, 0.0]) if point_masses else np.array([length / 2, 0, 0]),
                inertia=inertia,
            )
        )
        prev = length
    return ChainModel(joints=tuple(joints), gravity=np.array([0.0, 0.0, -9.81]))


@pytest.fixture()
def planar2():
    return make_planar_chain((1.0, 1.0))

import numpy as np
import pytest

from qsalab.features import random_basis, tabular_basis
from qsalab.mdp import ControlledMDP, random_mdp, six_state_example


def two_state_m1(gamma=0.5):
    """Actions stay/switch, deterministic moves, cost 1 in the first state."""
    P = np.array([np.eye(2), [[0.0, 1.0], [1.0, 0.0]]])
    c = np.array([[1.0, 1.0], [0.0, 0.0]])
    return ControlledMDP(P, c, gamma, name="m1")


@pytest.fixture
def m1():
    return two_state_m1()


@pytest.fixture
def six():
    return six_state_example(0.8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_random(rng):
    mdp = random_mdp(4, 3, rng, discount=0.7)
    return mdp, random_basis(mdp, 3, rng)


@pytest.fixture
def six_tabular(six):
    return six, tabular_basis(six)

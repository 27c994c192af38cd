import numpy as np
import pytest

from skillcil import harness, nets
from skillcil.env import EnvSpec, GoalBank

PRETRAIN_OBJECTS = (0, 1, 2, 3)
PRETRAIN_BUDGET = 20000


@pytest.fixture(scope="session")
def env_spec():
    return EnvSpec()


@pytest.fixture(scope="session")
def goal_bank(env_spec):
    return GoalBank(env_spec)


@pytest.fixture(scope="session")
def pretrained_base(env_spec):
    """Shared behavior-cloned base policy (expensive; built once)."""
    return harness.pretrain(env_spec, PRETRAIN_OBJECTS, PRETRAIN_BUDGET,
                            seed=0)


@pytest.fixture()
def base_copy(pretrained_base):
    import copy

    return copy.deepcopy(pretrained_base)


def base_policy_fn(base, goal_bank):
    def act(obs, goal_id):
        return nets.forward(base, None,
                            np.concatenate([obs, goal_bank.get(goal_id)]))
    return act

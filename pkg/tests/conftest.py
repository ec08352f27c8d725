import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from engdist.simenv import SyntheticMDP


def const_mdp(n_states=1, n_actions=1, click=1.0, term=1.0):
    """Uniform-dynamics MDP with constant click and termination tables."""
    s, a = n_states, n_actions
    return SyntheticMDP(
        n_states=s, n_actions=a,
        transition=np.full((s, a, s), 1.0 / s),
        click_prob=np.full((s, a), click),
        term_prob=np.full((s, a), term),
        behavior_policy=np.full((s, a), 1.0 / a),
        initial_state_dist=np.full(s, 1.0 / s))


@pytest.fixture
def single_state_mdp():
    return const_mdp()

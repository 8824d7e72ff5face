import numpy as np
import pytest

from abstraction import BimodalAbstraction, GridParams, Quantizer, find_risk_aware_abstraction
from system import Box, ColorMap, linear_system


@pytest.fixture
def g1():
    """q0 -> q1 (color 2, self-loop) which a spike can push into the odd sink q2."""
    return BimodalAbstraction.from_transitions(
        3, [1, 2, 1],
        nor={(0, 0): [1], (1, 0): [1], (2, 0): [2]},
        dist={(1, 0): [2]},
    )


@pytest.fixture
def g2():
    """a (color 2) and c (color 1); only infinitely many spikes keep the play in c."""
    return BimodalAbstraction.from_transitions(
        2, [2, 1],
        nor={(0, 0): [0], (1, 0): [0]},
        dist={(0, 0): [1], (1, 0): [1]},
    )


@pytest.fixture
def chain():
    """s0 -> s1 -> s2 by spikes only; s2 is an odd sink, so ranks are 2, 1, 0."""
    return BimodalAbstraction.from_transitions(
        3, [2, 2, 1],
        nor={(0, 0): [0], (1, 0): [1], (2, 0): [2]},
        dist={(0, 0): [1], (1, 0): [2]},
    )


@pytest.fixture
def chain_quantizer():
    return Quantizer(GridParams([0.0], [3.0], [1.0], inputs=[[0.0]]))


def integrator_1d(w_normal=0.1, w_high=1.1, tau=1.0, drift=1.0):
    """x' = drift * u + w on the real line."""
    return linear_system(A=[[0.0]], B=[[drift]], w_normal=Box([-w_normal], [w_normal]),
                         w_high=Box([-w_high], [w_high]), tau=tau, name="integrator")


@pytest.fixture
def line_problem():
    """Six unit cells, inputs -1/0/+1, color 2 on [1, 5) and 1 elsewhere."""
    sys = integrator_1d()
    grid = GridParams([0.0], [6.0], [1.0], inputs=[[-1.0], [0.0], [1.0]])
    cmap = ColorMap(regions=[([Box([1.0], [5.0])], 2)], default_color=1)
    gamma = find_risk_aware_abstraction(sys, grid, cmap)
    return sys, grid, cmap, gamma


@pytest.fixture
def ring_problem():
    """Periodic ring of six cells, all colored 2; nothing can go wrong."""
    sys = integrator_1d(drift=0.0)
    grid = GridParams([0.0], [6.0], [1.0], periodic=[True], inputs=[[0.0]])
    cmap = ColorMap(default_color=2)
    gamma = find_risk_aware_abstraction(sys, grid, cmap)
    return sys, grid, cmap, gamma


@pytest.fixture
def rng():
    return np.random.default_rng(0)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from jmsglmb.gaussian import UnscentedParams
from jmsglmb.jms import (BirthModel, BirthSite, JmsModel, MotionModel, SensorModel,
                         SwitchingMatrix, cv_matrix, white_accel_noise)


def line_model(n_modes=2, pd=0.9, ps=0.95, clutter=2.0, existence=(0.5,), birth_steps=None,
               switching=None, q=(0.5, 2.0), R=1.0, half_width=20.0):
    """Small 1-D constant-velocity jump-Markov model with state [x, v]."""
    T = 1.0
    F = np.array([[1.0, T], [0.0, 1.0]])
    Qb = np.array([[T ** 4 / 4, T ** 3 / 2], [T ** 3 / 2, T ** 2]])
    models = tuple(MotionModel(r, q[r % len(q)] ** 2 * Qb, F=F) for r in range(n_modes))
    if switching is None:
        switching = np.full((n_modes, n_modes), 0.2 / max(n_modes - 1, 1))
        np.fill_diagonal(switching, 0.8 if n_modes > 1 else 1.0)
    sensor = SensorModel(R=np.array([[R]]), detection_prob=pd, clutter_rate=clutter,
                         region=np.array([[-half_width, half_width]]), H=np.array([[1.0, 0.0]]))
    prior = np.zeros(n_modes)
    prior[0] = 1.0
    sites = tuple(BirthSite(e, np.array([float(3 * i), 0.0]), np.diag([4.0, 1.0]), prior)
                  for i, e in enumerate(existence))
    birth = BirthModel(sites, None if birth_steps is None else frozenset(birth_steps))
    return JmsModel(models, SwitchingMatrix(switching), sensor, birth, ps, T, UnscentedParams())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

"""Small shared builders for fast tests (no pretrained checkpoint needed)."""
import numpy as np

from cmaml_mppi import nn
from cmaml_mppi.dynamics import Model


def small_model(seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    norm = nn.Normalizer(np.array([0.0, 2.0, 0.0, 0.0, 0.0, 0.0]), np.array([0.02, 0.7, 0.15, 1.3, 0.55, 0.3]),
                         np.array([0.1, 1.0, 1.0, 3.0]))
    return Model(nn.init_params(rng) * scale, norm)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from benchtrack.model import ModelParams, classical_solution, exploratory_constants


@pytest.fixture(scope="session")
def params_ref() -> ModelParams:
    """The d=1 reference parameter set used across the closed-form tests."""
    return ModelParams(mu=[0.2], sigma=[[1.0]], sigma_z=0.2, kappa=0.5, eta=[1.0], rho=0.2)


@pytest.fixture(scope="session")
def classical_ref(params_ref):
    return classical_solution(params_ref)


@pytest.fixture(scope="session")
def exploratory_ref(params_ref):
    return exploratory_constants(params_ref, 0.2)


def random_params(rng: np.random.Generator, d: int | None = None) -> ModelParams:
    """A random well-conditioned parameter draw (kappa bounded away from 0)."""
    if d is None:
        d = int(rng.integers(1, 4))
    mu = rng.uniform(-1.0, 1.0, size=d)
    while np.allclose(mu, 0.0):
        mu = rng.uniform(-1.0, 1.0, size=d)
    sigma = np.eye(d) + 0.3 * rng.uniform(-1.0, 1.0, size=(d, d))
    while np.linalg.cond(sigma) > 1e3:
        sigma = np.eye(d) + 0.3 * rng.uniform(-1.0, 1.0, size=(d, d))
    kappa = float(rng.uniform(0.05, 1.0) * rng.choice([-1.0, 1.0]))
    return ModelParams(
        mu=mu,
        sigma=sigma,
        sigma_z=float(rng.uniform(0.05, 1.0)),
        kappa=kappa,
        eta=rng.uniform(-1.0, 1.0, size=d),
        rho=float(rng.uniform(0.05, 1.0)),
    )

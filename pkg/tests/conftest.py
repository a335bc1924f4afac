import numpy as np
import pytest

from services import synth_generator as synth
from services.config import Hyperparameters
from services.factorization_service import FactorModel
from services.ingestion_service import ContextMatrix


def random_model(rng, m, n, dims):
    i, j, k = dims
    return FactorModel(
        core=rng.uniform(size=(i, j, k)),
        o=rng.uniform(size=(m, i)),
        d=rng.uniform(size=(m, j)),
        t=rng.uniform(size=(n, k)),
    )


def random_context(rng, m):
    a = rng.uniform(size=(m, m))
    w = 0.5 * (a + a.T)
    np.fill_diagonal(w, 1.0)
    return ContextMatrix(w=w, contextless=np.zeros(m, dtype=bool))


def quiet_hyper(**changes):
    """Small weights and no neighbor pass unless asked for."""
    base = dict(alpha=0.0, beta=0.0, gamma=0.0, delta=0.0, epsilon=0.0, varepsilon=0.0,
                dim_i=2, dim_j=2, dim_k=2, max_rounds=50, tolerance=1e-6, nr_enabled=False, log_every=0)
    base.update(changes)
    return Hyperparameters(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_spec():
    return synth.PlantSpec(grid_rows=3, grid_cols=3, slices=6, dim_i=2, dim_j=2, dim_k=2, noise=0.0, seed=3)


@pytest.fixture
def tiny_city(tiny_spec):
    """(ground truth, r, context, graph) of a 9-zone noiseless city."""
    return synth.generate(tiny_spec)


@pytest.fixture
def desk_city():
    """Default synthetic city: 30 zones, 12 slices, dims (4, 4, 3), noise 0.01."""
    spec = synth.PlantSpec(seed=11)
    return spec, synth.generate(spec)

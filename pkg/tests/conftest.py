import numpy as np
import pytest

from rwseg import HardSeg, LaplacianSpec, Params, PriorTerm, SampleModel, SoftSeg, Volume
from rwseg.graph import build_laplacian

# acceptance lines collected by tests/test_acceptance.py and echoed at the end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_soft(rng, dims, K, conc=1.0):
    n = int(np.prod(dims))
    return SoftSeg(dims, rng.dirichlet(np.full(K, conc), size=n).T)


def random_model(rng, dims=None, K=None, n_lap=None, n_prior=None, connectivity=6):
    """Small random sample model with positive per-voxel prior weights."""
    if dims is None:
        dims = tuple(int(d) for d in rng.integers(1, [5, 5, 3]))
        if np.prod(dims) < 2:
            dims = (2, 1, 1)
    K = K or int(rng.integers(2, 5))
    n_lap = n_lap or int(rng.integers(1, 4))
    n_prior = n_prior or int(rng.integers(1, 4))
    x = Volume(dims, rng.random(int(np.prod(dims))))
    feats = ("intensity", "gradient-magnitude")
    laps = [build_laplacian(x, LaplacianSpec(beta_kernel=float(rng.choice([1.0, 10.0, 100.0])),
                                             feature=feats[a % 2], connectivity=connectivity))
            for a in range(n_lap)]
    priors = [PriorTerm(random_soft(rng, dims, K, 0.5), rng.uniform(0.2, 2.0, x.n))
              for _ in range(n_prior)]
    return SampleModel(x, laps, priors, K)


def random_params(rng, m):
    return Params(rng.uniform(0.0, 2.0, m.n_alpha), rng.uniform(0.1, 2.0, m.n_beta))


def random_hard(rng, m):
    return HardSeg(m.x.dims, rng.integers(0, m.K, m.n), m.K)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

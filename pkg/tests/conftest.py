from types import SimpleNamespace

import numpy as np
import pytest

from gmix import model as M
from gmix.data import make_digits_idx


@pytest.fixture(scope="session")
def digits_paths(tmp_path_factory):
    return make_digits_idx(tmp_path_factory.mktemp("digits"), n_train=300, n_test=100, seed=0)


def random_batch(rng, b, p, m, soft=False):
    x = rng.uniform(-2, 2, size=(b, p))
    if soft:
        y = rng.dirichlet(np.ones(m), size=b)
    else:
        y = np.eye(m)[rng.integers(m, size=b)]
    return SimpleNamespace(x=x, y=y)


def random_model(rng, p=3, hidden=(5,), m=3):
    spec = M.MlpSpec(p, hidden, m)
    return spec, M.init_model(spec, rng)

import numpy as np
import pytest

from aseplab.lattice import Params, Window


@pytest.fixture(scope="session", autouse=True)
def _threads():
    # keep CI deterministic and the box responsive
    from aseplab.harness import set_threads

    set_threads()


@pytest.fixture
def params07():
    return Params(0.7, rho=0.3)


@pytest.fixture
def small_window():
    return Window(-12, 12)


def seeded(seed):
    return np.random.default_rng(seed)

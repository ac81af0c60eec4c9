import numpy as np
import pytest

from finsler_holonomy.models import builtin_model

NONCLOSED_B = ["0.3*(1+0.1*x2)", "0"]


@pytest.fixture(scope="session")
def euclid2():
    return builtin_model("euclidean", dim=2)


@pytest.fixture(scope="session")
def euclid3():
    return builtin_model("euclidean", dim=3)


@pytest.fixture(scope="session")
def sphere2():
    return builtin_model("sphere", dim=2, radius=1.0)


@pytest.fixture(scope="session")
def sphere3():
    return builtin_model("sphere", dim=3, radius=1.0)


@pytest.fixture(scope="session")
def randers_const():
    return builtin_model("randers", dim=2, a=[[1.0, 0.0], [0.0, 1.0]], b=[0.3, 0.0])


@pytest.fixture(scope="session")
def randers2():
    return builtin_model("randers", dim=2, a=[[1.0, 0.0], [0.0, 1.0]], b=NONCLOSED_B)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

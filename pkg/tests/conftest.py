import numpy as np
import pytest

from imposterid.core import EnrollmentSet


def random_enrollment(rng, m, n, d):
    emb = rng.normal(size=(m, n, d))
    return EnrollmentSet(tuple(f"s{j}" for j in range(m)), emb)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

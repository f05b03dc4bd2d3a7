import numpy as np
import pytest

from segbias.phantom import CohortSpec, PhantomSpec, generate_cohort


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ribbon_cohort():
    return generate_cohort(PhantomSpec(), CohortSpec(n_per_group=10, seed=0))


@pytest.fixture(scope="session")
def ellipsoid_cohort():
    return generate_cohort(PhantomSpec(kind="ellipsoid"), CohortSpec(n_per_group=6, effect=1.3, seed=3))

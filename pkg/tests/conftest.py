import numpy as np
import pytest

from polariden.phy import EhReference, eh_fit, eh_reference_samples


@pytest.fixture(scope="session")
def surrogate():
    """Harvester surrogate fitted once to the reference curve on [0, 10] mW."""
    return eh_fit(eh_reference_samples(1000, 10.0, EhReference()), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

import warnings

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("psido", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("psido")


@pytest.fixture(autouse=True)
def _quiet_overflow():
    # lambda^{-k} on wide windows overflows harmlessly to zero
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield

import pytest
from threadpoolctl import threadpool_limits


@pytest.fixture(autouse=True, scope="session")
def _single_thread_blas():
    # bit-exact comparisons between runs assume a fixed BLAS summation order
    with threadpool_limits(limits=1):
        yield

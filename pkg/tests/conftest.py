import numpy as np
import pytest
from hypothesis import settings

from mvdlmc.model import Constant, Normal, Uniform, benchmark_kuramoto, kuramoto_model, zero_kernel_model

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def benchmark():
    return benchmark_kuramoto()


@pytest.fixture
def abm():
    """dX = 0.1 dt + 0.4 dW from x0 = 0; closed-form marginals."""
    return zero_kernel_model(Constant(0.1), 0.4, Constant(0.0), 1.0)


@pytest.fixture
def deterministic():
    """sigma = 0, x0 = 0, nu = 0.5: every path is x = 0.5 t."""
    return zero_kernel_model(Constant(0.5), 0.0, Constant(0.0), 1.0)


@pytest.fixture
def deterministic_kuramoto():
    return kuramoto_model(0.0, Constant(1.0), Constant(0.0), 1.0)


def random_model(seed):
    rng = np.random.default_rng(seed)
    return kuramoto_model(float(rng.uniform(0.1, 1.0)), Uniform(-0.3, 0.3), Normal(0.0, 0.3), 1.0)

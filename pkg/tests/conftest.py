import numpy as np
import pytest

from addsysid.benchmark import BenchmarkSpec, build_three_mass, default_controller
from addsysid.lti import simulate_additive
from addsysid.riv import SampledDataset

H = 0.01


@pytest.fixture(scope="session")
def bench():
    return build_three_mass()


@pytest.fixture(scope="session")
def ctrl():
    return default_controller()


@pytest.fixture(scope="session")
def noiseless_open(bench):
    rng = np.random.default_rng(11)
    u = rng.standard_normal((5000, 3))
    return SampledDataset(H, u, simulate_additive(bench, u, H))


@pytest.fixture(scope="session")
def closed_spec():
    return BenchmarkSpec(loop_mode="closed")


def perturbed(model, frac, seed):
    from addsysid.lti import AdditiveModel

    g = np.random.default_rng(seed)
    b = model.beta * (1 + g.uniform(-frac, frac, model.n_params))
    return AdditiveModel.from_beta(b, model.orders, model.n_y, model.n_u, check=False)


ACCEPTANCE_LINES = []


def report_criterion(k, ok, detail):
    """Record and print a one-line verdict for acceptance criterion ``k``."""
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

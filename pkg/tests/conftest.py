import numpy as np
import pytest

from byzcomp.objective import Objective, generate_synthetic, solve_reference


@pytest.fixture(scope="session")
def small_obj():
    return Objective(generate_synthetic(3, R=4, J=12, p=5), reg=0.01)


@pytest.fixture(scope="session")
def desk_obj():
    """The desk-scale synthetic instance the presets use, with its optimum."""
    obj = Objective(generate_synthetic(0, R=10, J=200, p=20, noise=0.5), reg=0.01)
    x_star, f_star = solve_reference(obj)
    return obj, x_star, f_star


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

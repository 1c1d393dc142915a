import numpy as np
import pytest

from langevin_lab.model import ModelSpec, PositionSpace, _wrap1

# lines printed by the acceptance suite, echoed in the terminal summary
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)


def custom_1d_model(V, dV, d2V, M, dM, D=lambda q: np.ones_like(q), dD=lambda q: np.zeros_like(q),
                    beta=1.0, topology="circle", bounds=None) -> ModelSpec:
    """One-degree model from scalar callables of q (arrays of positions)."""
    space = PositionSpace((topology,), (bounds,))
    return ModelSpec(
        1, space, beta,
        _wrap1(lambda q: V(q[..., 0]), 1),
        _wrap1(lambda q: dV(q[..., 0])[..., None], 1),
        _wrap1(lambda q: d2V(q[..., 0])[..., None, None], 1),
        _wrap1(lambda q: M(q[..., 0])[..., None, None], 1),
        _wrap1(lambda q: dM(q[..., 0])[..., None, None, None], 1),
        _wrap1(lambda q: D(q[..., 0])[..., None, None], 1),
        _wrap1(lambda q: dD(q[..., 0])[..., None, None, None], 1),
        "custom", {"beta": beta},
    )


@pytest.fixture
def exp_mass_model():
    """V = 0 and M(q) = exp(q) on a truncated line."""
    zero = np.zeros_like
    return custom_1d_model(zero, zero, zero, np.exp, np.exp, topology="line", bounds=(-3.0, 3.0))

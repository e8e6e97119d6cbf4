import numpy as np
import pytest

from featcraft.nets import LayerStack


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_stack(mat, bias=None):
    """A single linear layer computing ``x @ mat + bias``."""
    mat = np.asarray(mat, dtype=np.float64)
    bias = np.zeros(mat.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    return LayerStack([mat.shape[0], mat.shape[1]], ["linear"], params={"W0": mat, "b0": bias})


@pytest.fixture
def tiny_models(rng):
    """Small nonlinear enc/gen pair: 4-d latent -> 12 pixels -> 6 features."""
    gen = LayerStack([4, 10, 12], ["tanh", "sigmoid"], rng=rng)
    enc = LayerStack([12, 8, 6], ["tanh", "tanh"], rng=rng)
    return enc, gen


# one line per acceptance criterion, printed after the run regardless of capture
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

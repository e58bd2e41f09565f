import numpy as np
import pytest

from unifiedfl.model_graph import ArchitectureSpec, Activation, Conv2d, Dense, Flatten, build_model_graph


def small_mlp(G_e=4, G_v=4, seed=0, widths=(3, 5, 4, 2), activation="relu"):
    layers = []
    for i in range(len(widths) - 1):
        layers.append(Dense(widths[i], widths[i + 1]))
        if i < len(widths) - 2:
            layers.append(Activation(activation))
    spec = ArchitectureSpec("tiny_mlp", (widths[0],), tuple(layers))
    return build_model_graph(spec, seed, G_e, G_v)


def small_cnn(G_e=4, G_v=4, seed=0):
    spec = ArchitectureSpec(
        "tiny_cnn",
        (1, 6, 6),
        (Conv2d(1, 3, 3, 3, 1, 1), Activation("relu"), Conv2d(3, 2, 3, 3, 2, 1), Activation("relu"),
         Flatten(), Dense(2 * 3 * 3, 3)),
    )
    return build_model_graph(spec, seed, G_e, G_v)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance verdict line; all lines are echoed in the terminal summary."""
    def emit(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

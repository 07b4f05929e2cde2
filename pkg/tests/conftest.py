import numpy as np
import pytest

from freebrw import cli
from freebrw.group_model import FreeProductSpec, cyclic, ladder


@pytest.fixture
def z3z2():
    """Z/3 * Z/2 with simple random walk steps and equal weights."""
    return FreeProductSpec([cyclic(3), cyclic(2)], [0.5, 0.5], 0.5)


@pytest.fixture
def z3z3z3():
    return FreeProductSpec([cyclic(3)] * 3, [1 / 3] * 3, 0.5)


@pytest.fixture
def ladders():
    return FreeProductSpec([ladder(30), ladder(30)], [0.5, 0.5], 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bundled(name):
    return cli.load_config(cli.CONFIG_DIR / f"{name}.cfg")


def bundled_specs():
    """(name, FreeProductSpec) for every bundled free-product config."""
    out = []
    for path in cli.bundled_configs():
        cfg = cli.load_config(path)
        if cfg.spec is not None:
            out.append((path.stem, cfg.spec))
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

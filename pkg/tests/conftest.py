import numpy as np
import pytest

from deeplinear.model import R1_SHAPE, R2_SHAPE, DatasetPair, NetworkShape, WeightStack, reference_r1


@pytest.fixture
def r1():
    return reference_r1()


@pytest.fixture
def r1_shape():
    return R1_SHAPE


@pytest.fixture
def r2_shape():
    return R2_SHAPE


def random_instance(seed, max_width=4, max_m=8, hidden=(1, 2, 3)):
    """Seeded (shape, weights, data) triple at desk scale."""
    rng = np.random.default_rng(seed)
    H = int(rng.choice(hidden))
    widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=H + 2))
    shape = NetworkShape(widths)
    m = int(rng.integers(1, max_m + 1))
    data = DatasetPair(rng.standard_normal((shape.d_x, m)), rng.standard_normal((shape.d_y, m)))
    W = WeightStack.random(shape, rng, 0.8)
    return shape, W, data


def full_rank_data(rng, d_x, d_y, m):
    return DatasetPair(rng.standard_normal((d_x, m)), rng.standard_normal((d_y, m)))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])

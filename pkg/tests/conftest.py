import numpy as np
import pytest

from sparsecl.data import LatentConfig, NoiseConfig, build_dictionary
from sparsecl.rng import SeededRng

# acceptance verdict lines, printed once at the end of the session
VERDICTS = []


def record_verdict(label, passed, detail):
    # label is a criterion number or a free-form name for supporting checks
    name = f"criterion {label}" if isinstance(label, int) else label
    line = f"{name}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return SeededRng(1234, 99)


@pytest.fixture(scope="session")
def desk_dictionary():
    return build_dictionary(32, 256, 4.0, SeededRng(7, 0))


@pytest.fixture(scope="session")
def desk_configs():
    return LatentConfig.default(32), NoiseConfig.default(32)


def random_orthonormal(d1, d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d1, d)))
    return q

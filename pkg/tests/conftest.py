import numpy as np
import pytest

from rdkf.robust_filter import Sensor, StateSpaceModel

ACCEPTANCE_LINES: list[str] = []


def random_spd(rng, n, cond_floor=0.1):
    m = rng.normal(size=(n, n))
    return m @ m.T + cond_floor * np.eye(n)


def scalar_model(a=1.0, b=1.0, c=1.0, d=1.0, v0=1.0, strict=True):
    return StateSpaceModel(np.array([[a]]), np.array([[b]]), (Sensor(np.array([[c]]), np.array([[d]])),),
                           np.zeros(1), np.array([[v0]]), strict=strict)


def random_model(rng, n=3, sensor_dims=(1, 2), stable=True):
    A = rng.normal(size=(n, n))
    if stable:
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    B = np.linalg.cholesky(random_spd(rng, n, 0.5))
    sensors = tuple(Sensor(rng.normal(size=(p, n)), np.linalg.cholesky(random_spd(rng, p, 0.5)))
                    for p in sensor_dims)
    return StateSpaceModel(A, B, sensors, rng.normal(size=n), random_spd(rng, n, 0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def toy():
    return scalar_model()


def _criterion_key(line):
    label = line.split(":")[0].split()[-1]
    digits = "".join(ch for ch in label if ch.isdigit())
    return int(digits), label[len(digits):], line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)

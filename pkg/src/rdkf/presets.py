"""Kinematic 3-D target-tracking model used by the experiment presets.

State ordering is ``[velocity (3); position (3)]`` so that
``A = I + 0.1 Phi`` with ``Phi = [[0, 0], [I3, 0]]`` integrates velocity into
position over a 0.1 s sampling period.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .robust_filter import Sensor, StateSpaceModel

DT = 0.1
PROCESS_VAR = 0.001
R0 = 0.5 * np.diag([1.0, 4.0, 7.0])
# each sensor sees two of the three position axes: both horizontal ones, or one horizontal plus vertical
POSITION_PATTERNS = (np.diag([1.0, 1.0, 0.0]), np.diag([1.0, 0.0, 1.0]), np.diag([0.0, 1.0, 1.0]))
MAX_DRAWS = 1000


def tracking_dynamics() -> tuple[np.ndarray, np.ndarray]:
    phi = np.zeros((6, 6))
    phi[3:, :3] = np.eye(3)
    return np.eye(6) + DT * phi, np.sqrt(PROCESS_VAR) * np.eye(6)


def tracking_sensor(pattern: int, perm: np.ndarray, k: float = 1.0) -> Sensor:
    C = np.hstack([np.zeros((3, 3)), POSITION_PATTERNS[pattern]])
    P = np.eye(3)[perm]
    R = np.sqrt(k) * P @ R0 @ P.T
    return Sensor(C, np.linalg.cholesky(R))


def tracking_model(num_sensors: int, rng: np.random.Generator, k: float = 1.0) -> StateSpaceModel:
    """Random sensor suite for the tracking model, redrawn until collectively observable."""
    if num_sensors < 1:
        raise ConfigError("the tracking model needs at least one sensor")
    if k <= 0:
        raise ConfigError("noise scale k must be positive")
    A, B = tracking_dynamics()
    for _ in range(MAX_DRAWS):
        sensors = tuple(tracking_sensor(int(rng.integers(3)), rng.permutation(3), k)
                        for _ in range(num_sensors))
        model = StateSpaceModel(A, B, sensors, np.zeros(6), np.eye(6), strict=False)
        if model.is_observable():
            return StateSpaceModel(A, B, sensors, np.zeros(6), np.eye(6))
    raise ConfigError(f"no observable sensor suite with {num_sensors} sensors")

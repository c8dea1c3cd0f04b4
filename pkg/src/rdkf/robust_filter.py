"""Risk-sensitive robust Kalman filtering in information form.

The robust prediction step inflates the predicted covariance so that the
estimator is optimal against the least favorable model in a Kullback-Leibler
ball of radius ``b`` around the nominal model. The inflation is parameterised
by the risk sensitivity ``theta``, solving ``gamma(Omega, theta) = b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, NotPositiveDefiniteError, NumericalError
from .lingauss import GaussianInfo, block_diag, is_pd, spd_inv, symmetrize

ROOT_TOL = 1e-12
MAX_ITER = 200


@dataclass(frozen=True)
class Sensor:
    """Output map ``y = C x + D v`` with ``v`` standard white noise."""

    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        object.__setattr__(self, "D", np.atleast_2d(np.asarray(self.D, dtype=float)))
        if self.C.shape[0] != self.D.shape[0]:
            raise ConfigError(f"C has {self.C.shape[0]} rows but D has {self.D.shape[0]}")

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    @cached_property
    def R(self) -> np.ndarray:
        return symmetrize(self.D @ self.D.T)

    @cached_property
    def info_gain(self) -> np.ndarray:
        """``C' R^-1``, maps a measurement into information-vector space."""
        return self.C.T @ spd_inv(self.R)

    @cached_property
    def info_matrix(self) -> np.ndarray:
        """``C' R^-1 C``, the information one measurement adds."""
        return symmetrize(self.info_gain @ self.C)


@dataclass(frozen=True)
class StateSpaceModel:
    """Nominal model ``x+ = A x + B w``, ``y^i = C^i x + D^i v^i``."""

    A: np.ndarray
    B: np.ndarray
    sensors: tuple
    x0_mean: np.ndarray
    V0: np.ndarray
    strict: bool = field(default=True, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sensors", tuple(self.sensors))
        object.__setattr__(self, "x0_mean", np.atleast_1d(np.asarray(self.x0_mean, dtype=float)))
        object.__setattr__(self, "V0", np.atleast_2d(np.asarray(self.V0, dtype=float)))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or self.V0.shape != (n, n) or self.x0_mean.shape != (n,):
            raise ConfigError("inconsistent model dimensions")
        if any(s.C.shape[1] != n for s in self.sensors):
            raise ConfigError("every C^i needs n columns")
        if not is_pd(self.Q):
            raise ConfigError("Q = BB' must be positive definite (B full row rank)")
        for k, s in enumerate(self.sensors):
            if not is_pd(s.R):
                raise ConfigError(f"R of sensor {k} must be positive definite (D full row rank)")
        if not is_pd(self.V0):
            raise ConfigError("V0 must be positive definite")
        if self.strict:
            if abs(np.linalg.det(A)) <= 1e-12:
                raise ConfigError("A must be invertible")
            if not self.is_observable():
                raise ConfigError("(A, C) is not collectively observable")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return sum(s.dim for s in self.sensors)

    @cached_property
    def Q(self) -> np.ndarray:
        return symmetrize(self.B @ self.B.T)

    @cached_property
    def C(self) -> np.ndarray:
        if not self.sensors:
            return np.zeros((0, self.n))
        return np.vstack([s.C for s in self.sensors])

    @cached_property
    def D(self) -> np.ndarray:
        return block_diag(*[s.D for s in self.sensors]) if self.sensors else np.zeros((0, 0))

    @cached_property
    def R(self) -> np.ndarray:
        return block_diag(*[s.R for s in self.sensors]) if self.sensors else np.zeros((0, 0))

    @cached_property
    def sensor_slices(self) -> list[slice]:
        out, start = [], 0
        for s in self.sensors:
            out.append(slice(start, start + s.dim))
            start += s.dim
        return out

    def is_observable(self) -> bool:
        blocks, m = [], self.C
        for _ in range(self.n):
            blocks.append(m)
            m = m @ self.A
        return np.linalg.matrix_rank(np.vstack(blocks)) == self.n

    def single_sensor(self) -> "StateSpaceModel":
        """The same model seen by one sensor measuring the stacked output."""
        return StateSpaceModel(self.A, self.B, (Sensor(self.C, self.D),), self.x0_mean,
                               self.V0, strict=self.strict)


@dataclass(frozen=True)
class RobustConfig:
    tolerance: float = 0.0
    local_tolerances: Optional[Mapping[int, float]] = None
    root_tol: float = ROOT_TOL
    max_iter: int = MAX_ITER

    def __post_init__(self):
        if self.tolerance < 0:
            raise ConfigError("tolerance must be nonnegative")
        if self.local_tolerances and min(self.local_tolerances.values()) < 0:
            raise ConfigError("local tolerances must be nonnegative")


def _gamma_eig(w: np.ndarray, theta) -> np.ndarray:
    r = np.asarray(theta)[..., None] / w
    return 0.5 * np.sum(r / (1.0 - r) + np.log1p(-r), axis=-1)


def _gamma_prime_eig(w: np.ndarray, theta) -> np.ndarray:
    th = np.asarray(theta)[..., None]
    return 0.5 * np.sum(th / (w - th) ** 2, axis=-1)


def _eigs(omega: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(symmetrize(np.asarray(omega, dtype=float)))
    if np.any(w <= 0):
        raise NotPositiveDefiniteError("Omega must be positive definite")
    return w


def gamma(omega: np.ndarray, theta: float) -> float:
    """``1/2 {tr[(I - theta Omega^-1)^-1 - I] + log det(I - theta Omega^-1)}``."""
    w = _eigs(omega)
    if not 0 <= theta < w.min():
        raise ValueError(f"theta={theta} outside [0, sigma_min(Omega)={w.min()})")
    return float(_gamma_eig(w, theta))


def theta_from_eigs(w: np.ndarray, b, tol: float = ROOT_TOL, max_iter: int = MAX_ITER) -> np.ndarray:
    """Solve ``gamma = b`` given the eigenvalues ``w`` (..., n) of Omega.

    Bracketed bisection on ``(0, sigma_min)`` with Newton steps accepted only
    when they land strictly inside the current bracket.
    """
    b = np.broadcast_to(np.asarray(b, dtype=float), w.shape[:-1])
    theta = np.zeros(w.shape[:-1])
    active = b > 0
    if not np.any(active):
        return theta
    wa, ba = w[active], b[active]
    lo = np.zeros(ba.shape)
    hi = wa.min(axis=-1) * (1.0 - 1e-14)
    th = 0.5 * hi
    done = np.zeros(ba.shape, dtype=bool)
    for _ in range(max_iter):
        res = _gamma_eig(wa, th) - ba
        # aim an order of magnitude below tol; accept tol once the bracket is exhausted
        collapsed = (hi - lo) <= 8 * np.finfo(float).eps * hi
        done = (np.abs(res) < 0.1 * tol) | (collapsed & (np.abs(res) < tol))
        if done.all():
            theta[active] = th
            return theta
        lo = np.where(res < 0, th, lo)
        hi = np.where(res > 0, th, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = th - res / _gamma_prime_eig(wa, th)
        inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
        th = np.where(done, th, np.where(inside, newton, 0.5 * (lo + hi)))
    raise NumericalError(f"theta root-finder did not converge in {max_iter} iterations")


def find_theta(omega: np.ndarray, b, tol: float = ROOT_TOL, max_iter: int = MAX_ITER):
    """Risk sensitivity ``theta`` with ``gamma(Omega, theta) = b``; ``b = 0`` gives 0.

    ``omega`` may be a stack (..., n, n); ``b`` a scalar or matching array.
    """
    if np.any(np.asarray(b) < 0):
        raise ConfigError("tolerance b must be nonnegative")
    omega = np.asarray(omega, dtype=float)
    if np.ndim(b) == 0 and b == 0:
        return 0.0 if omega.ndim == 2 else np.zeros(omega.shape[:-2])
    theta = theta_from_eigs(_eigs(omega), b, tol, max_iter)
    return float(theta) if theta.ndim == 0 else theta


def lemma1_mu(b: float) -> float:
    """Constant ``mu`` with ``Omega - theta I >= mu Omega`` whenever ``gamma(Omega, theta) = b``.

    ``mu = 1/lam`` where ``lam > 1`` solves ``lam - log(lam) - 1 = 2b``.
    """
    if b < 0:
        raise ConfigError("tolerance b must be nonnegative")
    if b == 0:
        return 1.0
    lam = brentq(lambda x: x - math.log(x) - 1.0 - 2.0 * b, 1.0, 4.0 * b + 4.0,
                 xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return 1.0 / lam


# -- array kernels shared by the centralized and the distributed filters -----

def predict_cov(omega_filt: np.ndarray, A: np.ndarray, Q: np.ndarray, b,
                tol: float = ROOT_TOL, max_iter: int = MAX_ITER):
    """Robust covariance propagation; returns ``(omega_pred, theta, psi)``."""
    p_filt = spd_inv(omega_filt)
    omega_pred = symmetrize(spd_inv(A @ p_filt @ A.T + Q))
    if np.ndim(b) == 0 and b == 0:
        theta = np.zeros(omega_pred.shape[:-2])
        psi = omega_pred
    else:
        theta = theta_from_eigs(_eigs(omega_pred), b, tol, max_iter)
        psi = omega_pred - theta[..., None, None] * np.eye(A.shape[0])
    return omega_pred, theta, psi, p_filt


def predict_arrays(q: np.ndarray, omega: np.ndarray, A, Q, b,
                   tol: float = ROOT_TOL, max_iter: int = MAX_ITER):
    """Batched robust prediction of information pairs (leading dims shared)."""
    omega_pred, theta, psi, p_filt = predict_cov(omega, A, Q, b, tol, max_iter)
    x_filt = np.einsum("...ij,...j->...i", p_filt, q)
    q_pred = np.einsum("...ij,...j->...i", psi @ A, x_filt)
    return q_pred, psi, theta, omega_pred


def robust_correct(pred: GaussianInfo, C: np.ndarray, R: np.ndarray, y) -> GaussianInfo:
    """Measurement update ``Omega = Psi + C'R^-1 C``, ``q = q + C'R^-1 y``."""
    C = np.atleast_2d(C)
    if C.shape[1] != pred.dim or np.shape(y) != (C.shape[0],):
        raise ValueError("dimension mismatch in robust_correct")
    gain = C.T @ spd_inv(np.atleast_2d(R))
    return GaussianInfo(pred.q + gain @ np.asarray(y, dtype=float), pred.omega + gain @ C)


def robust_predict(filt: GaussianInfo, A: np.ndarray, Q: np.ndarray, b: float,
                   tol: float = ROOT_TOL, max_iter: int = MAX_ITER):
    """Robust time update; returns ``(predicted pair, theta, Omega_pred)``."""
    q, psi, theta, omega_pred = predict_arrays(filt.q, filt.omega, A, Q, b, tol, max_iter)
    return GaussianInfo(q, psi), float(theta), omega_pred


@dataclass
class FilterTrace:
    """Output of the centralized filter over ``T`` measurement steps.

    Index ``t`` of ``x_pred``/``V_pred`` holds ``x_{t|t-1}``/``V_{t|t-1}``
    for ``t = 0..T``; ``x_filt``, ``omega_filt`` and ``theta`` have ``T``
    entries. Vectors carry any extra leading batch dimensions of the input.
    """

    x_pred: np.ndarray
    V_pred: np.ndarray
    theta: np.ndarray
    x_filt: np.ndarray
    omega_filt: np.ndarray
    gain: np.ndarray


def centralized_robust_filter(model: StateSpaceModel, b: float, ys: np.ndarray,
                              config: Optional[RobustConfig] = None) -> FilterTrace:
    """Run the robust filter on stacked measurements ``ys`` of shape (..., T, p).

    ``gain[t]`` is ``G_t`` in ``x_{t+1|t} = A x_{t|t-1} + G_t (y_t - C x_{t|t-1})``.
    """
    cfg = config or RobustConfig(tolerance=b)
    ys = np.asarray(ys, dtype=float)
    T = ys.shape[-2]
    n, A, Q = model.n, model.A, model.Q
    C, Rinv = model.C, spd_inv(model.R) if model.p else np.zeros((0, 0))
    info_gain = C.T @ Rinv
    info_mat = symmetrize(info_gain @ C)

    psi = symmetrize(spd_inv(model.V0))
    q = np.broadcast_to(psi @ model.x0_mean, ys.shape[:-2] + (n,)).copy()
    x_pred = np.empty(ys.shape[:-2] + (T + 1, n))
    x_filt = np.empty(ys.shape[:-2] + (T, n))
    V_pred = np.empty((T + 1, n, n))
    omega_filt = np.empty((T, n, n))
    gains = np.empty((T, n, model.p))
    theta = np.empty(T)
    for t in range(T):
        V = symmetrize(spd_inv(psi))
        V_pred[t] = V
        x_pred[..., t, :] = q @ V.T
        omega = psi + info_mat
        q_f = q + ys[..., t, :] @ info_gain.T
        omega_pred, th, psi_next, p_filt = predict_cov(omega, A, Q, b, cfg.root_tol, cfg.max_iter)
        x_f = q_f @ p_filt.T
        x_filt[..., t, :] = x_f
        omega_filt[t] = omega
        gains[t] = A @ p_filt @ info_gain
        theta[t] = th
        q = (x_f @ A.T) @ psi_next.T
        psi = psi_next
    V_pred[T] = symmetrize(spd_inv(psi))
    x_pred[..., T, :] = q @ V_pred[T].T
    return FilterTrace(x_pred, V_pred, theta, x_filt, omega_filt, gains)

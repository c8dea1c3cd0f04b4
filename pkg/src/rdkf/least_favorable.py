"""Least favorable transition kernels, trajectory sampling and the robust steady state.

The worst-case model in the KL ball is realised as an exponential tilt of the
nominal kernel ``z = [x_{t+1}; y_t] | x_t ~ N(M x_t, W)`` with ``M = [A; C]``
and ``W = blkdiag(Q, R)``. The tilt weight is
``exp((theta/2) ||x_{t+1} - A xhat - G (y_t - C xhat)||^2)``, which makes the
kernel depend on the filter prediction ``xhat`` (colored, estimate-correlated
noise).

Two multipliers show up. The filter's risk sensitivity ``theta`` solves
``gamma(Omega_pred, theta) = b``. Tilting the whole predictive of ``z`` by that
``theta`` (:func:`saddle_predictive`) reproduces the filter's inflated
posterior exactly. A kernel acting on the realised ``x_t`` must instead spend
its budget per state, so the sampler uses the multiplier that makes the
expected kernel divergence equal ``b`` (:func:`best_response_theta`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, DivergenceError, InfeasibleTiltError, NumericalError
from .lingauss import (GaussianMoment, block_diag, cholesky, kl_moment, logdet_spd,
                       spd_inv, spd_solve, symmetrize, tilt)
from .robust_filter import StateSpaceModel, find_theta

STEADY_TOL = 1e-12
STEADY_MAX_ITER = 100_000


@dataclass(frozen=True)
class LfKernel:
    """Gaussian kernel ``z | x_t ~ N(M_x x_t + M_hat xhat, J^-1)``."""

    J: np.ndarray
    M_x: np.ndarray
    M_hat: np.ndarray
    G: np.ndarray
    theta: float
    cov: np.ndarray
    W: np.ndarray
    M: np.ndarray
    T: np.ndarray

    @property
    def H(self) -> np.ndarray:
        """Feedback map: the kernel mean is ``M x + H (x - xhat)``."""
        return self.M_x - self.M

    def mean(self, x, x_hat) -> np.ndarray:
        return np.asarray(x) @ self.M_x.T + np.asarray(x_hat) @ self.M_hat.T


def nominal_blocks(model: StateSpaceModel):
    """``(M, W)`` with ``M = [A; C]`` and ``W = blkdiag(Q, R)``."""
    return np.vstack([model.A, model.C]), block_diag(model.Q, model.R)


def predictor_gain(model: StateSpaceModel, V: np.ndarray) -> np.ndarray:
    """``G = A V C' (C V C' + R)^-1``, the one-step predictor gain."""
    C = model.C
    S = symmetrize(C @ V @ C.T + model.R)
    return spd_solve(S, C @ V @ model.A.T).T


def tilt_limit(model: StateSpaceModel, G: np.ndarray) -> float:
    """Supremum of feasible kernel multipliers, ``1 / lambda_max(Q + G R G')``."""
    return 1.0 / np.linalg.eigvalsh(symmetrize(model.Q + G @ model.R @ G.T))[-1]


def lf_kernel(model: StateSpaceModel, x_hat, V: np.ndarray, theta: float) -> LfKernel:
    """Nominal kernel tilted towards large errors of the predictor ``A xhat + G(y - C xhat)``.

    ``x_hat`` only enters through ``M_hat``; it is accepted for symmetry with
    the filter state it describes.
    """
    n = model.n
    M, W = nominal_blocks(model)
    G = predictor_gain(model, V)
    T = np.hstack([np.eye(n), -G])
    w_inv = spd_inv(W)
    J = symmetrize(w_inv - theta * T.T @ T)
    try:
        cov = symmetrize(spd_inv(J))
    except NumericalError as exc:
        raise InfeasibleTiltError(
            f"kernel multiplier {theta:g} exceeds the feasibility limit "
            f"{tilt_limit(model, G):g}; the tolerance must be small enough for the tilted "
            "precision to stay positive definite") from exc
    M_x = cov @ w_inv @ M
    M_hat = -theta * cov @ T.T @ T @ M
    return LfKernel(J, M_x, M_hat, G, float(theta), cov, W, M, T)


def expected_kernel_kl(kernel: LfKernel, V: np.ndarray) -> float:
    """``E_x KL(kernel(.|x) || nominal(.|x))`` for ``x ~ N(xhat, V)``, in closed form."""
    d = kernel.J.shape[0]
    w_inv = spd_inv(kernel.W)
    ratio = w_inv @ kernel.cov
    H = kernel.H
    quad = np.trace(H.T @ w_inv @ H @ V)
    logdet = logdet_spd(kernel.cov) - logdet_spd(kernel.W)
    return float(0.5 * (np.trace(ratio) - d - logdet + quad))


def best_response_theta(model: StateSpaceModel, V: np.ndarray, b: float) -> float:
    """Kernel multiplier whose expected divergence under ``N(xhat, V)`` is exactly ``b``."""
    if b < 0:
        raise ConfigError("tolerance b must be nonnegative")
    if b == 0:
        return 0.0
    G = predictor_gain(model, V)
    hi = tilt_limit(model, G) * (1.0 - 1e-12)
    x0 = np.zeros(model.n)

    def excess(th):
        return expected_kernel_kl(lf_kernel(model, x0, V, th), V) - b

    if excess(hi) <= 0:
        raise InfeasibleTiltError(f"no kernel multiplier reaches divergence b={b}")
    return brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def _predictive_blocks(model: StateSpaceModel, x_hat, V):
    M, W = nominal_blocks(model)
    return M @ np.asarray(x_hat, dtype=float), symmetrize(M @ V @ M.T + W), M


def saddle_predictive(model: StateSpaceModel, x_hat, V: np.ndarray, theta: float) -> GaussianMoment:
    """Predictive density of ``z`` at the saddle point of the minimax game.

    The pseudo-nominal predictive ``N(M xhat, M V M' + W)`` tilted by
    ``exp((theta/2) ||T (z - M xhat)||^2)``. With ``theta`` from
    :func:`find_theta` this keeps the ``y`` marginal and the conditional
    mean of ``x_{t+1}`` while inflating its conditional covariance to
    ``(P^-1 - theta I)^-1``; its divergence from the pseudo-nominal
    predictive equals ``b``.
    """
    mean, cov, M = _predictive_blocks(model, x_hat, V)
    G = predictor_gain(model, V)
    T = np.hstack([np.eye(model.n), -G])
    return tilt(GaussianMoment(mean, cov), T, T @ mean, theta)


def kernel_predictive(kernel: LfKernel, x_hat, V: np.ndarray) -> GaussianMoment:
    """Predictive of ``z`` induced by the kernel when ``x ~ N(xhat, V)``."""
    x_hat = np.asarray(x_hat, dtype=float)
    mean = kernel.M_x @ x_hat + kernel.M_hat @ x_hat
    return GaussianMoment(mean, symmetrize(kernel.M_x @ V @ kernel.M_x.T + kernel.cov))


def pseudo_nominal_predictive(model: StateSpaceModel, x_hat, V: np.ndarray) -> GaussianMoment:
    mean, cov, _ = _predictive_blocks(model, x_hat, V)
    return GaussianMoment(mean, cov)


# -- sampling -----------------------------------------------------------------

@dataclass(frozen=True)
class LfSchedule:
    """Per-step data of the least favorable model; independent of the realised data.

    ``V[t]`` is the robust prediction covariance ``V_{t|t-1}``, ``theta[t]``
    the filter multiplier and ``kernel_theta[t]`` the kernel multiplier.
    """

    model: StateSpaceModel
    b: float
    V: np.ndarray
    G: np.ndarray
    theta: np.ndarray
    kernel_theta: np.ndarray
    H: np.ndarray
    noise_chol: np.ndarray
    kernel_kl: np.ndarray

    @property
    def horizon(self) -> int:
        return self.G.shape[0]


def lf_schedule(model: StateSpaceModel, b: float, horizon: int) -> LfSchedule:
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    n, p = model.n, model.p
    A, Q, C = model.A, model.Q, model.C
    info = symmetrize(C.T @ spd_inv(model.R) @ C)
    V = np.empty((horizon + 1, n, n))
    G = np.empty((horizon, n, p))
    H = np.empty((horizon, n + p, n))
    L = np.empty((horizon, n + p, n + p))
    theta = np.empty(horizon)
    ktheta = np.empty(horizon)
    kls = np.empty(horizon)
    V[0] = symmetrize(model.V0)
    x0 = np.zeros(n)
    for t in range(horizon):
        kt = best_response_theta(model, V[t], b)
        ker = lf_kernel(model, x0, V[t], kt)
        G[t], H[t], ktheta[t] = ker.G, ker.H, kt
        L[t] = cholesky(ker.cov)
        kls[t] = expected_kernel_kl(ker, V[t])
        omega_pred = symmetrize(spd_inv(A @ spd_inv(spd_inv(V[t]) + info) @ A.T + Q))
        theta[t] = find_theta(omega_pred, b)
        V[t + 1] = symmetrize(spd_inv(omega_pred - theta[t] * np.eye(n)))
    return LfSchedule(model, float(b), V, G, theta, ktheta, H, L, kls)


@dataclass
class Trajectory:
    states: np.ndarray        # (T+1, n)
    measurements: np.ndarray  # (T, p)
    w_tilde: np.ndarray       # (T, m)
    v_tilde: np.ndarray       # (T, p)
    x_pred: np.ndarray        # (T+1, n) centralized robust predictions


def sample_trajectory(model: StateSpaceModel, b: float, horizon: int, rng: np.random.Generator,
                      schedule: Optional[LfSchedule] = None) -> Trajectory:
    """Draw one trajectory of the least favorable model.

    A centralized robust filter on the stacked output runs alongside; each
    ``z_t`` is drawn from the kernel built at its prediction. Passing a
    precomputed ``schedule`` skips the covariance recursion.
    """
    sched = schedule if schedule is not None else lf_schedule(model, b, horizon)
    if sched.horizon < horizon or sched.model is not model or sched.b != b:
        raise ConfigError("schedule does not match the requested model, tolerance or horizon")
    n, p = model.n, model.p
    A, C = model.A, model.C
    x = np.empty((horizon + 1, n))
    xh = np.empty((horizon + 1, n))
    y = np.empty((horizon, p))
    x[0] = model.x0_mean + cholesky(model.V0) @ rng.standard_normal(n)
    xh[0] = model.x0_mean
    M = np.vstack([A, C])
    for t in range(horizon):
        eps = x[t] - xh[t]
        z = M @ x[t] + sched.H[t] @ eps + sched.noise_chol[t] @ rng.standard_normal(n + p)
        x[t + 1] = z[:n]
        y[t] = z[n:]
        xh[t + 1] = A @ xh[t] + sched.G[t] @ (y[t] - C @ xh[t])
    w = (x[1:] - x[:-1] @ A.T) @ np.linalg.pinv(model.B).T
    v = (y - x[:-1] @ C.T) @ np.linalg.pinv(model.D).T
    return Trajectory(x, y, w, v, xh)


def sample_nominal(model: StateSpaceModel, horizon: int, rng: np.random.Generator) -> Trajectory:
    """Trajectory of the nominal model with white noises; ``x_pred`` is the plain Kalman predictor."""
    return sample_trajectory(model, 0.0, horizon, rng)


def noise_variance_bounds(w_tilde: np.ndarray, v_tilde: np.ndarray, burn_in: int = 0):
    """Extreme eigenvalues of the empirical covariance of ``[w_t; v_{t+1}]``.

    Inputs have shape (T, m) / (T, p) or (runs, T, m) / (runs, T, p).
    """
    w = np.asarray(w_tilde, dtype=float)
    v = np.asarray(v_tilde, dtype=float)
    if w.ndim == 2:
        w, v = w[None], v[None]
    stacked = np.concatenate([w[:, burn_in:-1], v[:, burn_in + 1:]], axis=-1)
    samples = stacked.reshape(-1, stacked.shape[-1])
    if samples.shape[0] < 100:
        raise ConfigError(f"need at least 100 samples after burn-in, got {samples.shape[0]}")
    eig = np.linalg.eigvalsh(np.cov(samples, rowvar=False))
    return float(eig[0]), float(eig[-1])


# -- steady state and local tolerances ----------------------------------------

@dataclass(frozen=True)
class SteadyState:
    V: np.ndarray
    P: np.ndarray
    theta: float
    G: np.ndarray
    K: np.ndarray
    K_tilde: np.ndarray
    iterations: int

    def to_dict(self) -> dict:
        return {"V_inf": self.V.tolist(), "P_inf": self.P.tolist(), "theta_inf": self.theta,
                "G_inf": self.G.tolist(), "K": self.K.tolist(), "K_tilde": self.K_tilde.tolist(),
                "iterations": self.iterations}


def robust_steady_state(model: StateSpaceModel, b: float, tol: float = STEADY_TOL,
                        max_iter: int = STEADY_MAX_ITER) -> SteadyState:
    """Iterate the robust Riccati recursion to its fixed point."""
    n = model.n
    A, Q, C, R = model.A, model.Q, model.C, model.R
    info = symmetrize(C.T @ spd_inv(R) @ C)
    V = symmetrize(model.V0)
    for it in range(1, max_iter + 1):
        P = symmetrize(A @ spd_inv(spd_inv(V) + info) @ A.T + Q)
        omega = symmetrize(spd_inv(P))
        theta = find_theta(omega, b)
        V_next = symmetrize(spd_inv(omega - theta * np.eye(n)))
        if not np.all(np.isfinite(V_next)):
            raise DivergenceError("robust Riccati recursion produced non-finite values")
        if np.linalg.norm(V_next - V) < tol:
            V = V_next
            break
        V = V_next
    else:
        raise DivergenceError(f"robust Riccati recursion did not converge in {max_iter} steps")
    P = symmetrize(A @ spd_inv(spd_inv(V) + info) @ A.T + Q)
    theta = find_theta(spd_inv(P), b)
    G = predictor_gain(model, V)
    K_yy = symmetrize(C @ V @ C.T + R)
    K_xy = A @ V @ C.T
    K = np.block([[symmetrize(A @ V @ A.T + Q), K_xy], [K_xy.T, K_yy]])
    K_tilde = K.copy()
    K_tilde[:n, :n] = symmetrize(V + G @ K_yy @ G.T)
    return SteadyState(V, P, float(theta), G, K, K_tilde, it)


def _block_kl(steady: SteadyState, idx: np.ndarray) -> float:
    sub = np.ix_(idx, idx)
    zero = np.zeros(len(idx))
    return kl_moment(zero, steady.K_tilde[sub], zero, steady.K[sub])


def full_tolerance(steady: SteadyState) -> float:
    """Divergence of the least favorable from the pseudo-nominal stationary law of ``z``."""
    return _block_kl(steady, np.arange(steady.K.shape[0]))


def state_tolerance(steady: SteadyState) -> float:
    """Tolerance from the ``x_{t+1}`` block alone (every measurement deleted)."""
    return _block_kl(steady, np.arange(steady.V.shape[0]))


def local_tolerances(steady: SteadyState, model: StateSpaceModel) -> dict[int, float]:
    """Per-sensor tolerance ``b^k``, keyed by sensor position in ``model.sensors``.

    The other sensors' rows and columns are deleted from ``K`` and ``K_tilde``
    before taking the divergence.
    """
    n = model.n
    out = {}
    for k, sl in enumerate(model.sensor_slices):
        idx = np.concatenate([np.arange(n), n + np.arange(sl.start, sl.stop)])
        out[k] = _block_kl(steady, idx)
    return out

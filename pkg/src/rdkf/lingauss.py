"""Dense SPD linear algebra and Gaussian densities in moment / information form.

Array helpers accept stacks of matrices with arbitrary leading batch
dimensions, so the same code path serves a single filter and a whole
network of nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InfeasibleTiltError, NotPositiveDefiniteError

PSD_SLACK = 1e-10


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def cholesky(m: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(symmetrize(m))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc


def spd_inv(m: np.ndarray) -> np.ndarray:
    """Inverse of a (stack of) SPD matrices through the Cholesky factor."""
    lower = cholesky(m)
    eye = np.broadcast_to(np.eye(m.shape[-1]), m.shape)
    linv = np.linalg.solve(lower, eye)
    return np.swapaxes(linv, -1, -2) @ linv


def spd_solve(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``m x = rhs`` for SPD ``m``; ``rhs`` is a vector (stack) or matrix."""
    lower = cholesky(m)
    vec = rhs.ndim == m.ndim - 1
    r = rhs[..., None] if vec else rhs
    z = np.linalg.solve(lower, r)
    x = np.linalg.solve(np.swapaxes(lower, -1, -2), z)
    return x[..., 0] if vec else x


def logdet_spd(m: np.ndarray) -> np.ndarray:
    lower = cholesky(m)
    return 2.0 * np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1)), axis=-1)


def min_eig(m: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(symmetrize(m))[..., 0]


def is_pd(m: np.ndarray) -> bool:
    try:
        cholesky(m)
    except NotPositiveDefiniteError:
        return False
    return True


def psd_leq(x: np.ndarray, y: np.ndarray, slack: float = PSD_SLACK) -> np.ndarray:
    """Loewner order ``x <= y`` tested as ``min-eig(y - x) >= -slack``."""
    return min_eig(y - x) >= -slack


def block_diag(*blocks: np.ndarray) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


@dataclass(frozen=True)
class GaussianMoment:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def to_info(self) -> "GaussianInfo":
        omega = symmetrize(spd_inv(self.cov))
        return GaussianInfo(omega @ self.mean, omega)


@dataclass(frozen=True)
class GaussianInfo:
    """Gaussian belief ``N(omega^-1 q, omega^-1)`` stored as an information pair."""

    q: np.ndarray
    omega: np.ndarray

    @property
    def dim(self) -> int:
        return self.q.shape[-1]

    @property
    def mean(self) -> np.ndarray:
        return spd_solve(self.omega, self.q)

    @property
    def cov(self) -> np.ndarray:
        return symmetrize(spd_inv(self.omega))

    def to_moment(self) -> GaussianMoment:
        return GaussianMoment(self.mean, self.cov)


def kl_info(qa, omega_a, qb, omega_b) -> np.ndarray:
    """KL(N_a || N_b) for information pairs; batched over leading dims."""
    n = qa.shape[-1]
    ma = spd_solve(omega_a, qa)
    mb = spd_solve(omega_b, qb)
    d = ma - mb
    trace = np.trace(spd_solve(omega_a, omega_b), axis1=-2, axis2=-1)
    maha = np.einsum("...i,...ij,...j->...", d, omega_b, d)
    val = 0.5 * (trace - n + maha + logdet_spd(omega_a) - logdet_spd(omega_b))
    if np.any(val < -1e-12):
        raise NotPositiveDefiniteError("negative KL divergence; inputs are ill-conditioned")
    return np.maximum(val, 0.0)


def kl_divergence(a: GaussianInfo, b: GaussianInfo) -> float:
    """Kullback-Leibler divergence ``KL(a || b)`` between two information pairs."""
    if a.q.shape != b.q.shape or a.omega.shape != b.omega.shape:
        raise ValueError(f"dimension mismatch: {a.q.shape} vs {b.q.shape}")
    return float(kl_info(a.q, a.omega, b.q, b.omega))


def kl_moment(mean_a, cov_a, mean_b, cov_b) -> float:
    """KL(N(mean_a, cov_a) || N(mean_b, cov_b))."""
    n = mean_a.shape[-1]
    d = mean_b - mean_a
    val = 0.5 * (np.trace(spd_solve(cov_b, cov_a)) - n + d @ spd_solve(cov_b, d)
                 + logdet_spd(cov_b) - logdet_spd(cov_a))
    return max(float(val), 0.0)


def tilt(g: GaussianMoment, T: np.ndarray, u, theta: float) -> GaussianMoment:
    """Reweight ``g`` by ``exp((theta/2) ||T z - u||^2)`` and renormalise.

    The result has precision ``cov^-1 - theta T'T`` and information vector
    ``cov^-1 mean - theta T'u``.
    """
    if theta == 0.0:
        return g
    T = np.atleast_2d(np.asarray(T, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    prec = symmetrize(spd_inv(g.cov))
    j = symmetrize(prec - theta * T.T @ T)
    h = prec @ g.mean - theta * T.T @ u
    try:
        cov = symmetrize(spd_inv(j))
    except NotPositiveDefiniteError as exc:
        raise InfeasibleTiltError(
            f"tilt with theta={theta:g} leaves a non positive definite precision"
        ) from exc
    return GaussianMoment(cov @ h, cov)


def condition(joint: GaussianMoment, observed: Sequence[int], value) -> GaussianMoment:
    """Conditional of the unobserved block given ``joint[observed] = value``."""
    idx = np.asarray(observed, dtype=int)
    rest = np.setdiff1d(np.arange(joint.dim), idx)
    s = joint.cov
    s_ab = s[np.ix_(rest, idx)]
    s_bb = s[np.ix_(idx, idx)]
    resid = np.atleast_1d(np.asarray(value, dtype=float)) - joint.mean[idx]
    mean = joint.mean[rest] + s_ab @ spd_solve(s_bb, resid)
    cov = s[np.ix_(rest, rest)] - s_ab @ spd_solve(s_bb, s_ab.T)
    return GaussianMoment(mean, symmetrize(cov))

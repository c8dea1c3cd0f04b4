import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdkf.errors import ConfigError, NotPositiveDefiniteError
from rdkf.lingauss import GaussianInfo, min_eig, spd_inv
from rdkf.robust_filter import (Sensor, StateSpaceModel, centralized_robust_filter, find_theta, gamma,
                                lemma1_mu, robust_correct, robust_predict)

from conftest import random_model, random_spd, scalar_model

# frozen high-precision oracle values (mpmath, 40 digits), scalar Omega = 1
THETA_B005 = 0.34046560921221486
LAMBDA_B005 = 1.516221161425022
MU = {0.01: 0.8240288750487667, 0.05: 0.6595343907877851, 0.2: 0.4589782590905984}


def mp_lambda(b):
    mp.mp.dps = 40
    return mp.findroot(lambda lam: lam - mp.log(lam) - 1 - 2 * mp.mpf(b), 1.5 + b)


@pytest.mark.parametrize("b", [0.01, 0.05, 0.2])
def test_frozen_oracle_constants_reproduce(b):
    lam = mp_lambda(b)
    assert float(1 / lam) == pytest.approx(MU[b], abs=1e-15)
    if b == 0.05:
        assert float(lam) == pytest.approx(LAMBDA_B005, abs=1e-15)
        assert float(1 - 1 / lam) == pytest.approx(THETA_B005, abs=1e-15)


def gamma_matrix_form(omega, theta):
    n = omega.shape[0]
    X = np.linalg.inv(np.eye(n) - theta * np.linalg.inv(omega))
    return 0.5 * (np.trace(X) - np.linalg.slogdet(X)[1] - n)


def test_gamma_at_zero(rng):
    assert gamma(random_spd(rng, 4), 0.0) == 0.0


def test_gamma_scalar_value():
    assert gamma(np.eye(1), 0.3408) == pytest.approx(0.050130995, abs=1e-9)


def test_gamma_matches_matrix_formula(rng):
    for _ in range(50):
        om = random_spd(rng, 5)
        th = 0.9 * rng.uniform() * np.linalg.eigvalsh(om)[0]
        assert gamma(om, th) == pytest.approx(gamma_matrix_form(om, th), rel=1e-9, abs=1e-13)


@pytest.mark.parametrize("c", [0.1, 3.0, 10.0])
def test_gamma_scale_invariance(rng, c):
    om = random_spd(rng, 3)
    th = 0.5 * np.linalg.eigvalsh(om)[0]
    assert gamma(c * om, c * th) == pytest.approx(gamma(om, th), rel=1e-12)


def test_gamma_domain():
    with pytest.raises(ValueError):
        gamma(np.eye(2), 1.0)


def test_gamma_strictly_increasing(rng):
    om = random_spd(rng, 4)
    thetas = np.linspace(0, np.linalg.eigvalsh(om)[0], 102)[:-1]
    vals = [gamma(om, t) for t in thetas]
    assert np.all(np.diff(vals) > 0)


def test_find_theta_zero_tolerance(rng):
    assert find_theta(random_spd(rng, 3), 0.0) == 0.0


@pytest.mark.parametrize("omega, expected", [(1.0, THETA_B005), (2.0, 2 * THETA_B005), (0.5, 0.5 * THETA_B005)])
def test_find_theta_scalar_oracle(omega, expected):
    assert find_theta(np.array([[omega]]), 0.05) == pytest.approx(expected, abs=1e-12)


def test_find_theta_residual_random(rng):
    for _ in range(200):
        n = int(rng.integers(1, 9))
        om = random_spd(rng, n, 1e-3)
        b = float(rng.uniform(1e-4, 1.0))
        th = find_theta(om, b)
        assert 0 < th < np.linalg.eigvalsh(om)[0]
        assert abs(gamma(om, th) - b) < 1e-12


def test_find_theta_batched_matches_single(rng):
    stack = np.stack([random_spd(rng, 4) for _ in range(6)])
    batch = find_theta(stack, 0.05)
    assert np.allclose(batch, [find_theta(m, 0.05) for m in stack], rtol=0, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.sampled_from([0.1, 10.0]))
def test_find_theta_scale_equivariance(n, seed, c):
    om = random_spd(np.random.default_rng(seed), n, 0.05)
    assert find_theta(c * om, 0.05) == pytest.approx(c * find_theta(om, 0.05), abs=1e-9 * max(1, c))


def test_find_theta_errors():
    with pytest.raises(ConfigError):
        find_theta(np.eye(2), -0.1)
    with pytest.raises(NotPositiveDefiniteError):
        find_theta(-np.eye(2), 0.1)


def test_lemma1_mu_values():
    assert lemma1_mu(0.0) == 1.0
    for b, mu in MU.items():
        assert lemma1_mu(b) == pytest.approx(mu, abs=1e-13)


@pytest.mark.parametrize("b", [0.01, 0.05, 0.2])
def test_lemma1_inequality(rng, b):
    mu = lemma1_mu(b)
    for _ in range(100):
        om = random_spd(rng, 6, 1e-2)
        th = find_theta(om, b)
        assert min_eig(om - th * np.eye(6) - mu * om) >= -1e-9


def test_correct_zero_output_matrix():
    pred = GaussianInfo(np.array([1.0, 2.0]), np.eye(2))
    out = robust_correct(pred, np.zeros((1, 2)), np.eye(1), np.array([5.0]))
    assert np.array_equal(out.q, pred.q) and np.array_equal(out.omega, pred.omega)


def test_correct_scalar():
    out = robust_correct(GaussianInfo(np.zeros(1), np.eye(1)), np.eye(1), np.eye(1), np.array([2.0]))
    assert out.q[0] == 2.0 and out.omega[0, 0] == 2.0
    assert out.mean[0] == pytest.approx(1.0, abs=1e-15)


def test_correct_matches_moment_kalman(rng):
    n, p = 4, 2
    P = random_spd(rng, n)
    x = rng.normal(size=n)
    C = rng.normal(size=(p, n))
    R = random_spd(rng, p)
    y = rng.normal(size=p)
    K = P @ C.T @ np.linalg.inv(C @ P @ C.T + R)
    x_post, P_post = x + K @ (y - C @ x), (np.eye(n) - K @ C) @ P
    out = robust_correct(GaussianInfo(np.linalg.solve(P, x), np.linalg.inv(P)), C, R, y)
    assert np.allclose(out.mean, x_post, atol=1e-10)
    assert np.allclose(out.cov, P_post, atol=1e-10)


def test_correct_dimension_mismatch():
    with pytest.raises(ValueError):
        robust_correct(GaussianInfo(np.zeros(2), np.eye(2)), np.eye(1), np.eye(1), np.zeros(1))


def test_predict_classical_when_b_zero():
    pred, theta, omega_pred = robust_predict(GaussianInfo(np.array([3.0]), np.eye(1)), np.eye(1), np.eye(1), 0.0)
    assert theta == 0.0
    assert omega_pred[0, 0] == pytest.approx(0.5)
    assert pred.omega[0, 0] == pytest.approx(0.5)
    assert pred.q[0] == pytest.approx(1.5)


def test_predict_robust_scalar():
    pred, theta, omega_pred = robust_predict(GaussianInfo(np.zeros(1), np.eye(1)), np.eye(1), np.eye(1), 0.05)
    assert theta == pytest.approx(0.5 * THETA_B005, abs=1e-12)
    assert pred.omega[0, 0] == pytest.approx(0.5 - 0.5 * THETA_B005, abs=1e-12)


def test_predict_information_form(rng):
    n = 3
    A, Q = rng.normal(size=(n, n)), random_spd(rng, n)
    filt = GaussianInfo(rng.normal(size=n), random_spd(rng, n))
    pred, theta, omega_pred = robust_predict(filt, A, Q, 0.1)
    assert np.allclose(omega_pred, np.linalg.inv(A @ np.linalg.inv(filt.omega) @ A.T + Q))
    assert np.allclose(pred.omega, omega_pred - theta * np.eye(n))
    assert np.allclose(pred.mean, A @ filt.mean)


def moment_kalman(model, ys):
    x, P = model.x0_mean.copy(), model.V0.copy()
    C, R, A, Q = model.C, model.R, model.A, model.Q
    preds, filts = [x], []
    for y in ys:
        K = P @ C.T @ np.linalg.inv(C @ P @ C.T + R)
        xf = x + K @ (y - C @ x)
        Pf = P - K @ C @ P
        filts.append(xf)
        x, P = A @ xf, A @ Pf @ A.T + Q
        preds.append(x)
    return np.array(preds), np.array(filts)


def test_centralized_b_zero_is_kalman(rng):
    model = random_model(rng, n=4, sensor_dims=(2, 1))
    ys = rng.normal(size=(100, model.p)) * 3
    out = centralized_robust_filter(model, 0.0, ys)
    preds, filts = moment_kalman(model, ys)
    assert np.max(np.abs(out.x_pred - preds)) < 1e-10
    assert np.max(np.abs(out.x_filt - filts)) < 1e-10
    assert np.all(out.theta == 0)


def test_centralized_without_measurements_follows_dynamics():
    A = np.array([[1.0, 0.1], [0.0, 0.9]])
    model = StateSpaceModel(A, np.eye(2), (Sensor(np.zeros((1, 2)), np.eye(1)),), np.array([1.0, -2.0]),
                            np.eye(2), strict=False)
    out = centralized_robust_filter(model, 0.05, np.zeros((20, 1)))
    for t in range(21):
        assert np.allclose(out.x_pred[t], np.linalg.matrix_power(A, t) @ model.x0_mean, atol=1e-12)


def test_centralized_robust_inflates_covariance(toy):
    ys = np.zeros((60, 1))
    robust = centralized_robust_filter(toy, 0.05, ys)
    plain = centralized_robust_filter(toy, 0.0, ys)
    assert np.all(robust.V_pred[1:, 0, 0] > plain.V_pred[1:, 0, 0])


def test_centralized_batched_runs(rng, toy):
    ys = rng.normal(size=(3, 30, 1))
    batch = centralized_robust_filter(toy, 0.05, ys)
    for r in range(3):
        single = centralized_robust_filter(toy, 0.05, ys[r])
        assert np.allclose(batch.x_pred[r], single.x_pred, atol=1e-13)


@pytest.mark.parametrize("kwargs, message", [
    (dict(A=np.zeros((1, 1))), "invertible"),
    (dict(B=np.zeros((1, 1))), "Q"),
    (dict(sensors=(Sensor(np.zeros((1, 1)), np.eye(1)),)), "observable"),
    (dict(sensors=(Sensor(np.eye(1), np.zeros((1, 1))),)), "R"),
])
def test_model_validation(kwargs, message):
    args = dict(A=np.eye(1), B=np.eye(1), sensors=(Sensor(np.eye(1), np.eye(1)),), x0_mean=np.zeros(1), V0=np.eye(1))
    args.update(kwargs)
    with pytest.raises(ConfigError, match=message):
        StateSpaceModel(**args)


def test_model_stacks_sensors(rng):
    model = random_model(rng, n=3, sensor_dims=(1, 2))
    assert model.p == 3
    assert model.C.shape == (3, 3)
    assert np.allclose(model.R[1:, 1:], model.sensors[1].R)
    assert model.R[0, 1] == 0

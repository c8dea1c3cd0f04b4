import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from rdkf.errors import ConfigError, InfeasibleTiltError
from rdkf.least_favorable import (best_response_theta, expected_kernel_kl, full_tolerance, kernel_predictive,
                                  lf_kernel, lf_schedule, local_tolerances, noise_variance_bounds,
                                  nominal_blocks, pseudo_nominal_predictive, robust_steady_state,
                                  saddle_predictive, sample_trajectory, state_tolerance, tilt_limit,
                                  predictor_gain)
from rdkf.lingauss import GaussianMoment, condition, kl_moment, spd_inv
from rdkf.presets import tracking_model
from rdkf.robust_filter import Sensor, StateSpaceModel, find_theta

from conftest import random_model, random_spd, scalar_model


def pseudo_nominal_P(model, V):
    info = model.C.T @ spd_inv(model.R) @ model.C
    return model.A @ np.linalg.inv(np.linalg.inv(V) + info) @ model.A.T + model.Q


def filter_theta(model, V, b):
    return find_theta(np.linalg.inv(pseudo_nominal_P(model, V)), b)


def joint_kl_oracle(model, kernel, x_hat, V):
    """KL between the joint laws of (x_t, z_t) under kernel and nominal, x_t ~ N(x_hat, V)."""
    M, W = nominal_blocks(model)
    n = model.n

    def joint(Mx, Mh, S):
        mean = np.concatenate([x_hat, (Mx + Mh) @ x_hat])
        cov = np.block([[V, V @ Mx.T], [Mx @ V, Mx @ V @ Mx.T + S]])
        return mean, cov

    a = joint(kernel.M_x, kernel.M_hat, kernel.cov)
    b = joint(M, np.zeros_like(M), W)
    return kl_moment(a[0], a[1], b[0], b[1])


def test_kernel_at_zero_is_nominal(rng):
    model = random_model(rng)
    V = random_spd(rng, model.n)
    k = lf_kernel(model, rng.normal(size=model.n), V, 0.0)
    M, W = nominal_blocks(model)
    assert np.allclose(k.J, np.linalg.inv(W))
    assert np.allclose(k.M_x, M)
    assert np.allclose(k.M_hat, 0)
    assert expected_kernel_kl(k, V) == pytest.approx(0, abs=1e-12)


def test_kernel_mean_map(rng):
    model = random_model(rng)
    V, x_hat, x = random_spd(rng, model.n), rng.normal(size=model.n), rng.normal(size=model.n)
    k = lf_kernel(model, x_hat, V, 0.3 * tilt_limit(model, predictor_gain(model, V)))
    direct = k.cov @ (np.linalg.inv(k.W) @ k.M @ x - k.theta * k.T.T @ k.T @ k.M @ x_hat)
    assert np.allclose(k.mean(x, x_hat), direct)
    assert np.allclose(k.mean(x, x_hat), k.M @ x + k.H @ (x - x_hat))


def test_expected_kl_closed_form_matches_joint_oracle(rng):
    for _ in range(20):
        model = random_model(rng, n=3, sensor_dims=(2,))
        V, x_hat = random_spd(rng, 3), rng.normal(size=3)
        th = rng.uniform(0.05, 0.9) * tilt_limit(model, predictor_gain(model, V))
        k = lf_kernel(model, x_hat, V, th)
        assert expected_kernel_kl(k, V) == pytest.approx(joint_kl_oracle(model, k, x_hat, V), rel=1e-8, abs=1e-12)


@pytest.mark.parametrize("b", [0.01, 0.05, 0.2])
def test_best_response_meets_tolerance(rng, b):
    model = random_model(rng, n=4, sensor_dims=(1, 2))
    V = random_spd(rng, 4)
    th = best_response_theta(model, V, b)
    assert expected_kernel_kl(lf_kernel(model, np.zeros(4), V, th), V) == pytest.approx(b, abs=1e-8)


def test_kernel_at_filter_theta_undershoots(toy):
    """The per-state kernel built at the filter multiplier spends less than b."""
    V = np.eye(1)
    th = filter_theta(toy, V, 0.05)
    assert expected_kernel_kl(lf_kernel(toy, np.zeros(1), V, th), V) < 0.05
    assert best_response_theta(toy, V, 0.05) > th


def test_infeasible_kernel(toy):
    V = np.eye(1)
    with pytest.raises(InfeasibleTiltError, match="tolerance"):
        lf_kernel(toy, np.zeros(1), V, 1.01 * tilt_limit(toy, predictor_gain(toy, V)))


@pytest.mark.parametrize("seed", range(4))
def test_saddle_predictive_invariants(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, n=3, sensor_dims=(1, 2))
    V, x_hat, b = random_spd(rng, 3), rng.normal(size=3), 0.05
    P = pseudo_nominal_P(model, V)
    th = find_theta(np.linalg.inv(P), b)
    nom = pseudo_nominal_predictive(model, x_hat, V)
    lf = saddle_predictive(model, x_hat, V, th)
    n, y_idx = model.n, np.arange(model.n, model.n + model.p)
    assert np.allclose(lf.mean[n:], nom.mean[n:], atol=1e-9)
    assert np.allclose(lf.cov[n:, n:], nom.cov[n:, n:], atol=1e-9)
    y = rng.normal(size=model.p)
    c_lf, c_nom = condition(lf, y_idx, y), condition(nom, y_idx, y)
    assert np.allclose(c_lf.mean, c_nom.mean, atol=1e-9)
    assert np.allclose(c_nom.cov, P, atol=1e-9)
    assert np.allclose(c_lf.cov, np.linalg.inv(np.linalg.inv(P) - th * np.eye(n)), atol=1e-9)
    assert kl_moment(lf.mean, lf.cov, nom.mean, nom.cov) == pytest.approx(b, abs=1e-9)


def test_saddle_conditional_variance_monte_carlo(toy):
    """Importance-weighted nominal samples reproduce the inflated conditional variance (toy, b=0.05)."""
    rng = np.random.default_rng(11)
    V, x_hat = np.eye(1), np.zeros(1)
    P = pseudo_nominal_P(toy, V)[0, 0]
    th = filter_theta(toy, V, 0.05)
    G = predictor_gain(toy, V)[0, 0]
    nom = pseudo_nominal_predictive(toy, x_hat, V)
    z = rng.multivariate_normal(nom.mean, nom.cov, size=10**6)
    w = np.exp(0.5 * th * (z[:, 0] - G * z[:, 1]) ** 2)
    est = []
    for zb, wb in zip(np.array_split(z, 20), np.array_split(w, 20)):
        wb = wb / wb.sum()
        m = wb @ zb
        c = (zb - m).T @ (wb[:, None] * (zb - m))
        est.append(c[0, 0] - c[0, 1] ** 2 / c[1, 1])
    est = np.array(est)
    sigma = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - 1 / (1 / P - th)) < 3 * sigma


def test_kernel_predictive_misses_exact_inflation(toy):
    """The per-state kernel cannot reproduce the saddle predictive: its conditional variance is smaller."""
    V = np.eye(1)
    P = pseudo_nominal_P(toy, V)[0, 0]
    th = filter_theta(toy, V, 0.05)
    kp = kernel_predictive(lf_kernel(toy, np.zeros(1), V, th), np.zeros(1), V)
    cond = condition(kp, [1], [0.0]).cov[0, 0]
    assert P < cond < 1 / (1 / P - th)


def test_sampler_nominal_noise_is_white():
    model = scalar_model()
    rng = np.random.default_rng(2)
    w = np.concatenate([sample_trajectory(model, 0.0, 400, rng).w_tilde for _ in range(25)])
    n = w.size
    assert abs(w.mean()) < 3 / np.sqrt(n)
    assert abs(w.var() - 1) < 3 * np.sqrt(2 / n)


def _cross_cov(model, b, runs=150, T=200, seed=4):
    sched = lf_schedule(model, b, T)
    rng = np.random.default_rng(seed)
    ws, vs = [], []
    for _ in range(runs):
        tr = sample_trajectory(model, b, T, rng, sched)
        ws.append(tr.w_tilde[50:-1, 0])
        vs.append(tr.v_tilde[51:, 0])
    prod = np.concatenate(ws) * np.concatenate(vs)
    return prod.mean(), prod.std() / np.sqrt(prod.size)


def test_noise_correlation_under_least_favorable_model(toy):
    mean, se = _cross_cov(toy, 0.05)
    assert abs(mean) > 3 * se
    mean0, se0 = _cross_cov(toy, 0.0)
    assert abs(mean0) < 3 * se0


def test_sampler_respects_schedule_contract(toy):
    sched = lf_schedule(toy, 0.05, 10)
    with pytest.raises(ConfigError):
        sample_trajectory(toy, 0.01, 10, np.random.default_rng(0), sched)


def test_schedule_kernel_divergence_is_active(toy):
    sched = lf_schedule(toy, 0.05, 50)
    assert np.allclose(sched.kernel_kl, 0.05, atol=1e-8)
    assert np.all(sched.kernel_theta > sched.theta)


def test_noise_variance_bounds():
    model = scalar_model()
    rng = np.random.default_rng(8)
    nominal = [sample_trajectory(model, 0.0, 300, rng) for _ in range(30)]
    lo, hi = noise_variance_bounds(np.stack([t.w_tilde for t in nominal]), np.stack([t.v_tilde for t in nominal]), 10)
    assert 0.9 < lo <= hi < 1.1
    sched = lf_schedule(model, 0.05, 300)
    lf = [sample_trajectory(model, 0.05, 300, rng, sched) for _ in range(30)]
    lo, hi = noise_variance_bounds(np.stack([t.w_tilde for t in lf]), np.stack([t.v_tilde for t in lf]), 10)
    assert hi > 1.1 and np.isfinite(hi)
    with pytest.raises(ConfigError):
        noise_variance_bounds(nominal[0].w_tilde[:50], nominal[0].v_tilde[:50])


def test_noise_variance_bounds_tighten_with_samples():
    model = scalar_model()
    spreads = []
    for runs in (4, 64):
        vals = []
        for rep in range(6):
            rng = np.random.default_rng([rep, runs])
            trs = [sample_trajectory(model, 0.0, 100, rng) for _ in range(runs)]
            vals.append(noise_variance_bounds(np.stack([t.w_tilde for t in trs]), np.stack([t.v_tilde for t in trs]))[1])
        spreads.append(np.std(vals))
    assert spreads[1] < spreads[0]


def test_steady_state_b_zero_solves_dare(rng):
    model = random_model(rng, n=3, sensor_dims=(1, 1))
    ss = robust_steady_state(model, 0.0)
    ref = solve_discrete_are(model.A.T, model.C.T, model.Q, model.R)
    assert np.allclose(ss.V, ref, atol=1e-10)
    assert np.allclose(ss.V, ss.P, atol=1e-12)
    assert ss.theta == 0.0


def test_steady_state_structure(rng):
    model = random_model(rng, n=3, sensor_dims=(2, 1))
    ss = robust_steady_state(model, 0.05)
    n = model.n
    D = ss.K_tilde - ss.K
    assert np.allclose(D[n:, :], 0) and np.allclose(D[:, n:], 0)
    assert np.allclose(D[:n, :n], ss.V - ss.P, atol=1e-10)
    assert np.allclose(ss.V, np.linalg.inv(np.linalg.inv(ss.P) - ss.theta * np.eye(n)), atol=1e-9)
    assert np.linalg.eigvalsh(ss.V - ss.P)[0] >= -1e-10


def test_steady_state_toy_fixed_point(toy):
    ss = robust_steady_state(toy, 0.05)
    V = ss.V[0, 0]
    P = 1 / (1 / V + 1) + 1
    th = find_theta(np.array([[1 / P]]), 0.05)
    assert abs(1 / (1 / P - th) - V) < 1e-10


def test_steady_state_diverges_with_tight_budget(toy):
    from rdkf.errors import DivergenceError
    with pytest.raises(DivergenceError):
        robust_steady_state(toy, 0.05, max_iter=3)


def test_full_output_single_sensor_tolerance(rng):
    model = random_model(rng, n=3, sensor_dims=(2,))
    ss = robust_steady_state(model, 0.05)
    b1 = local_tolerances(ss, model)[0]
    n, p = model.n, model.p
    K, Kt = ss.K, ss.K_tilde
    direct = 0.5 * (np.linalg.slogdet(K @ np.linalg.inv(Kt))[1] + np.trace(Kt @ np.linalg.inv(K)) - (n + p))
    assert b1 == pytest.approx(direct, abs=1e-10)
    assert b1 == pytest.approx(full_tolerance(ss), abs=1e-12)


def test_zero_tolerance_gives_zero_locals(rng):
    model = random_model(rng, n=3, sensor_dims=(1, 1, 1))
    ss = robust_steady_state(model, 0.0)
    assert all(v == pytest.approx(0, abs=1e-12) for v in local_tolerances(ss, model).values())


def test_local_tolerances_bounded_and_nested(rng):
    model = random_model(rng, n=3, sensor_dims=(1, 1, 1))
    ss = robust_steady_state(model, 0.05)
    local = local_tolerances(ss, model)
    full = full_tolerance(ss)
    assert all(0 <= v <= full + 1e-12 for v in local.values())
    n = model.n
    # adding measurement channels never lowers the divergence of the retained block
    from rdkf.least_favorable import _block_kl
    chain = [np.arange(n), np.arange(n + 1), np.arange(n + 2), np.arange(n + 3)]
    vals = [_block_kl(ss, idx) for idx in chain]
    assert np.all(np.diff(vals) >= -1e-12)
    assert vals[0] == pytest.approx(state_tolerance(ss))


def test_tracking_local_tolerances():
    model = tracking_model(5, np.random.default_rng(3))
    ss = robust_steady_state(model, 0.05)
    assert full_tolerance(ss) == pytest.approx(0.05, abs=1e-9)
    assert all(0 < v <= 0.05 for v in local_tolerances(ss, model).values())

"""Standard mixed-effects EM tests: E-step against dense Gaussian
conditioning, M-step reductions, monotone likelihood ascent, fixed-point and
equivariance properties, and fixed-point agreement across the plain and
accelerated drivers."""

import numpy as np
import pytest

from conftest import dense_posterior_oracle, random_dataset, random_params, random_pd
from mixenv.em import (
    EmOptions,
    _pack_params,
    _unpack_params,
    e_step,
    fit_standard_em,
    initial_params,
    m_step,
)
from mixenv.model import LongitudinalDataset, NaturalParams, obs_loglik


def test_e_step_matches_dense_conditioning():
    rng = np.random.default_rng(0)
    for _ in range(6):
        r = int(rng.integers(1, 3))
        q = int(rng.integers(1, 3))
        if q * r > 4:
            q = 1
        data, theta = random_dataset(rng, n=3, r=r, p=2, q=q, J=3, unbalanced=True)
        post = e_step(theta, data)
        for i in range(data.n):
            mu, sig = dense_posterior_oracle(theta, data, i)
            assert np.allclose(post.mu[i], mu, atol=1e-8)
            assert np.allclose(post.sigma_post[i], sig, atol=1e-8)


def test_e_step_flat_prior_is_gls():
    rng = np.random.default_rng(1)
    r, p, q, J = 2, 1, 1, 6
    data, theta = random_dataset(rng, n=1, r=r, p=p, q=q, J=J)
    flat = NaturalParams(alpha=theta.alpha, beta=theta.beta,
                         sigma_eps=theta.sigma_eps,
                         sigma_b=1e8 * np.eye(q * r))
    post = e_step(flat, data)
    # GLS of vec(b) from this subject's residuals: A = Z^T kron I_r per column
    Y, X, Z = data.subject(0)
    w = np.linalg.inv(theta.sigma_eps)
    resid = Y - theta.alpha[:, None] - theta.beta @ X
    lhs = np.zeros((q * r, q * r))
    rhs = np.zeros(q * r)
    for j in range(J):
        a = np.kron(Z[:, j][None, :], np.eye(r)).T  # (qr, r) = A_ij^T
        lhs += a @ w @ a.T
        rhs += a @ w @ resid[:, j]
    gls = np.linalg.solve(lhs, rhs)
    assert np.allclose(post.mu[0], gls, rtol=1e-4, atol=1e-6)


def test_e_step_zero_residuals_zero_posterior_mean():
    rng = np.random.default_rng(2)
    r, p, q, J = 2, 2, 1, 3
    theta = random_params(rng, r, p, q)
    X = rng.standard_normal((p, J))
    Z = rng.standard_normal((q, J))
    Y = theta.alpha[:, None] + theta.beta @ X  # exact mean, no noise, no b
    data = LongitudinalDataset([Y], [X], [Z])
    post = e_step(theta, data)
    assert np.allclose(post.mu[0], 0.0, atol=1e-12)


def test_e_step_scalar_hand_formula():
    # r=q=1, J=2: precision = 1/sb + (z1^2+z2^2)/se, mu = cov * sum z_j resid_j / se
    alpha, beta, se, sb = 0.3, 1.2, 0.7, 2.5
    z = np.array([[1.0, -2.0]])
    x = np.array([[0.5, 1.5]])
    y = np.array([[1.9, -0.4]])
    data = LongitudinalDataset([y], [x], [z])
    theta = NaturalParams(alpha=[alpha], beta=[[beta]], sigma_eps=[[se]], sigma_b=[[sb]])
    post = e_step(theta, data)
    resid = y[0] - alpha - beta * x[0]
    prec = 1.0 / sb + (z[0] ** 2).sum() / se
    sig = 1.0 / prec
    mu = sig * (z[0] * resid).sum() / se
    assert np.isclose(post.sigma_post[0, 0, 0], sig, rtol=1e-12)
    assert np.isclose(post.mu[0, 0], mu, rtol=1e-12)


def test_m_step_reduces_to_ols_without_random_effects():
    rng = np.random.default_rng(3)
    data, theta = random_dataset(rng, n=5, r=2, p=2, q=1, J=3)
    post = e_step(theta, data)
    post.mu[:] = 0.0
    post.sigma_post[:] = 0.0
    post.psi_b[:] = 0.0
    post.m_obs[:] = 0.0
    new = m_step(theta, post, data)
    yc = data.Yt - data.Yt.mean(axis=0)
    xc = data.Xt - data.Xt.mean(axis=0)
    beta_ols = np.linalg.solve(xc.T @ xc, xc.T @ yc).T
    assert np.allclose(new.beta, beta_ols, atol=1e-10)
    assert np.allclose(new.alpha, data.Yt.mean(axis=0) - beta_ols @ data.Xt.mean(axis=0))
    resid = yc - xc @ beta_ols.T
    assert np.allclose(new.sigma_eps, resid.T @ resid / data.J_total, atol=1e-10)


def test_m_step_sigma_b_is_posterior_second_moment():
    rng = np.random.default_rng(4)
    data, theta = random_dataset(rng, n=6, r=2, p=1, q=1, J=2)
    post = e_step(theta, data)
    new = m_step(theta, post, data)
    expected = np.zeros_like(theta.sigma_b)
    for i in range(data.n):
        expected += post.sigma_post[i] + np.outer(post.mu[i], post.mu[i])
    assert np.allclose(new.sigma_b, expected / data.n, atol=1e-12)


def test_m_step_two_point_hand_case():
    # n=2 subjects, J=1, r=1, p=1, q=1, posterior forced to zero:
    # beta = sum yc*xc / sum xc^2 on the two centered points, alpha = ybar - beta xbar
    data = LongitudinalDataset(
        [np.array([[2.0]]), np.array([[6.0]])],
        [np.array([[1.0]]), np.array([[3.0]])],
        [np.array([[1.0]]), np.array([[1.0]])],
    )
    theta = NaturalParams(alpha=[0.0], beta=[[0.0]], sigma_eps=[[1.0]], sigma_b=[[1.0]])
    post = e_step(theta, data)
    post.mu[:] = 0.0
    post.sigma_post[:] = 0.0
    post.psi_b[:] = 0.0
    post.m_obs[:] = 0.0
    new = m_step(theta, post, data)
    # centered: x = (-1, 1), y = (-2, 2) -> beta = 4/2 = 2, alpha = 4 - 2*2 = 0
    assert np.isclose(new.beta[0, 0], 2.0)
    assert np.isclose(new.alpha[0], 0.0)


def test_fit_monotone_loglik():
    rng = np.random.default_rng(5)
    for _ in range(5):
        data, _ = random_dataset(rng, n=8, r=2, p=2, q=1, J=3, unbalanced=True)
        fit = fit_standard_em(data, EmOptions(max_iter=200, loglik_check=True))
        trace = fit.loglik_trace
        assert np.all(np.diff(trace) >= -1e-8)


def test_fit_recovers_ols_when_sigma_b_vanishes():
    rng = np.random.default_rng(6)
    r, p, q = 2, 2, 1
    theta = NaturalParams(alpha=rng.standard_normal(r),
                          beta=rng.standard_normal((r, p)),
                          sigma_eps=random_pd(rng, r),
                          sigma_b=1e-10 * np.eye(q * r))
    data, _ = random_dataset(rng, n=60, r=r, p=p, q=q, J=4, theta=theta)
    fit = fit_standard_em(data, EmOptions(max_iter=500))
    yc = data.Yt - data.Yt.mean(axis=0)
    xc = data.Xt - data.Xt.mean(axis=0)
    beta_ols = np.linalg.solve(xc.T @ xc, xc.T @ yc).T
    assert np.max(np.abs(fit.theta_hat.beta - beta_ols)) < 1e-2


def test_fit_consistency_smoke():
    rng = np.random.default_rng(7)
    theta = random_params(rng, 2, 1, 1, beta_scale=2.0)
    errs = []
    for n in (150, 600):
        data, _ = random_dataset(np.random.default_rng(70), n=n, r=2, p=1, q=1,
                                 J=3, theta=theta)
        fit = fit_standard_em(data, EmOptions(max_iter=300))
        errs.append(np.linalg.norm(fit.theta_hat.beta - theta.beta))
    assert errs[1] < errs[0]


def test_fit_fixed_point_property():
    rng = np.random.default_rng(8)
    data, _ = random_dataset(rng, n=10, r=2, p=1, q=1, J=3)
    opts = EmOptions(max_iter=2000, delta_tol=1e-10)
    fit = fit_standard_em(data, opts)
    assert fit.converged
    theta = fit.theta_hat
    new = m_step(theta, e_step(theta, data), data)
    delta = np.abs(new.beta - theta.beta).sum() / np.abs(new.beta).sum()
    assert delta < 1e-9


def test_fit_translation_equivariance():
    rng = np.random.default_rng(9)
    data, _ = random_dataset(rng, n=10, r=2, p=1, q=1, J=3)
    shift = np.array([2.5, -1.0])
    shifted = LongitudinalDataset([y + shift[:, None] for y in data.Y], data.X, data.Z)
    opts = EmOptions(max_iter=2000, delta_tol=1e-11)
    f0 = fit_standard_em(data, opts)
    f1 = fit_standard_em(shifted, opts)
    assert f0.converged and f1.converged
    assert np.allclose(f1.theta_hat.alpha, f0.theta_hat.alpha + shift, atol=1e-8)
    assert np.allclose(f1.theta_hat.beta, f0.theta_hat.beta, atol=1e-9)
    assert np.allclose(f1.theta_hat.sigma_eps, f0.theta_hat.sigma_eps, atol=1e-8)
    assert np.allclose(f1.theta_hat.sigma_b, f0.theta_hat.sigma_b, atol=1e-7)


def test_initial_params_deterministic():
    rng = np.random.default_rng(10)
    data, _ = random_dataset(rng, n=3, r=2, p=2, q=1, J=2)
    init = initial_params(data)
    assert np.array_equal(init.alpha, np.zeros(2))
    assert np.array_equal(init.beta, np.zeros((2, 2)))
    assert np.array_equal(init.sigma_eps, np.eye(2))
    assert np.array_equal(init.sigma_b, np.eye(2))


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(11)
    data, theta = random_dataset(rng, n=3, r=3, p=2, q=2, J=2)
    v = _pack_params(theta)
    back = _unpack_params(v, data)
    assert np.array_equal(back.alpha, theta.alpha)
    assert np.array_equal(back.beta, theta.beta)
    assert np.allclose(back.sigma_eps, theta.sigma_eps)
    assert np.allclose(back.sigma_b, theta.sigma_b)
    assert np.array_equal(back.sigma_eps, back.sigma_eps.T)


def test_drivers_reach_same_fixed_point():
    rng = np.random.default_rng(12)
    data, _ = random_dataset(rng, n=12, r=2, p=2, q=1, J=3)
    fits = {}
    for accel in ("none", "squarem", "anderson"):
        opts = EmOptions(max_iter=4000, delta_tol=1e-10, accel=accel)
        fits[accel] = fit_standard_em(data, opts)
        assert fits[accel].converged, accel
    base = fits["none"].theta_hat
    ll_base = obs_loglik(base, data)
    for accel in ("squarem", "anderson"):
        th = fits[accel].theta_hat
        assert np.allclose(th.beta, base.beta, atol=1e-6), accel
        assert np.isclose(obs_loglik(th, data), ll_base, atol=1e-6), accel


def test_accelerated_drivers_keep_monotone_trace():
    rng = np.random.default_rng(13)
    data, _ = random_dataset(rng, n=10, r=2, p=1, q=1, J=3, unbalanced=True)
    for accel in ("squarem", "anderson"):
        fit = fit_standard_em(data, EmOptions(max_iter=300, accel=accel,
                                              loglik_check=True))
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8), accel


def test_plain_driver_trace_length_equals_iterations():
    rng = np.random.default_rng(14)
    data, _ = random_dataset(rng, n=5, r=2, p=1, q=1, J=2)
    fit = fit_standard_em(data, EmOptions(max_iter=50, accel="none",
                                          loglik_check=True))
    assert len(fit.loglik_trace) == fit.iterations


def test_loglik_plateau_stop():
    rng = np.random.default_rng(15)
    data, _ = random_dataset(rng, n=10, r=2, p=1, q=1, J=3)
    opts = EmOptions(max_iter=5000, delta_tol=1e-300, accel="none",
                     loglik_check=False, ll_plateau_tol=1e-4,
                     ll_plateau_window=10)
    fit = fit_standard_em(data, opts)
    assert not fit.converged  # plateau stop never claims delta convergence
    assert fit.iterations < 5000


def test_unknown_accel_rejected():
    rng = np.random.default_rng(16)
    data, _ = random_dataset(rng, n=3, r=2, p=1, q=1, J=2)
    with pytest.raises(ValueError):
        fit_standard_em(data, EmOptions(accel="nesterov"))


def test_warm_start_init_is_used():
    rng = np.random.default_rng(17)
    data, _ = random_dataset(rng, n=8, r=2, p=1, q=1, J=3)
    ref = fit_standard_em(data, EmOptions(max_iter=2000, delta_tol=1e-10))
    warm = fit_standard_em(data, EmOptions(max_iter=2000, delta_tol=1e-10),
                           init=ref.theta_hat)
    assert warm.iterations <= 3
    assert np.allclose(warm.theta_hat.beta, ref.theta_hat.beta, atol=1e-8)

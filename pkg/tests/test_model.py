"""Model-layer tests: parameter maps, the observed-data likelihood against a
dense-Gaussian oracle, condition diagnostics, simulators, and the balanced
vectorized-model envelope basis."""

import numpy as np
import pytest

from conftest import (
    dense_loglik_oracle,
    random_dataset,
    random_envelope_params,
    random_params,
    random_pd,
)
from mixenv.errors import DataFormatError, SingularCovarianceError
from mixenv.matkit import projector
from mixenv.model import (
    EnvelopeParams,
    LongitudinalDataset,
    NaturalParams,
    SimulationConfig,
    check_strict_conditions,
    envelope_of_span,
    natural_of_envelope,
    obs_loglik,
    orth_complement,
    prop1_basis,
    scenario_config,
    simulate,
)


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        LongitudinalDataset([], [], [])
    y = np.zeros((2, 3))
    with pytest.raises(DataFormatError):
        LongitudinalDataset([y], [np.zeros((1, 2))], [np.zeros((1, 3))])
    bad = y.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataFormatError):
        LongitudinalDataset([bad], [np.zeros((1, 3))], [np.zeros((1, 3))])


def test_dataset_layout_and_subset():
    rng = np.random.default_rng(0)
    data, _ = random_dataset(rng, n=4, r=2, p=2, q=1, J=3, unbalanced=True)
    assert data.J_total == int(data.J.sum())
    assert data.Yt.shape == (data.J_total, data.r)
    start = data.subj_ptr[2]
    assert np.array_equal(data.Yt[start:start + data.J[2]], data.Y[2].T)
    sub = data.subset([1, 1, 3])
    assert sub.n == 3
    assert np.array_equal(sub.Y[0], data.Y[1])
    assert np.array_equal(sub.Y[2], data.Y[3])


def test_natural_of_envelope_full_dimension():
    rng = np.random.default_rng(1)
    r, p, q = 3, 2, 1
    phi = random_envelope_params(rng, r, p, q, u=r)
    phi.gamma = np.eye(r)
    theta = natural_of_envelope(phi)
    assert np.allclose(theta.beta, phi.eta)
    assert np.allclose(theta.sigma_eps, phi.omega)


def test_natural_of_envelope_null_dimension():
    rng = np.random.default_rng(2)
    phi = random_envelope_params(rng, 3, 2, 1, u=0)
    theta = natural_of_envelope(phi)
    assert np.array_equal(theta.beta, np.zeros((3, 2)))
    assert np.allclose(theta.sigma_eps, phi.omega0)


def test_natural_of_envelope_axis_aligned_two_dim():
    phi = EnvelopeParams(alpha=np.zeros(2), gamma=np.array([[1.0], [0.0]]),
                         eta=np.array([[2.0]]), omega=np.array([[0.25]]),
                         omega0=np.array([[9.0]]), sigma_b=np.eye(2), u=1)
    theta = natural_of_envelope(phi)
    assert np.allclose(theta.sigma_eps, np.diag([0.25, 9.0]))
    assert np.allclose(theta.beta, [[2.0], [0.0]])


def test_natural_of_envelope_invariant_to_complement_rotation():
    rng = np.random.default_rng(3)
    phi = random_envelope_params(rng, 5, 2, 1, u=2)
    gamma0 = orth_complement(phi.gamma)
    rot, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    t1 = natural_of_envelope(phi, gamma0=gamma0)
    # rotating the complement basis rotates omega0's coordinates with it
    phi_rot = EnvelopeParams(alpha=phi.alpha, gamma=phi.gamma, eta=phi.eta,
                             omega=phi.omega, omega0=rot.T @ phi.omega0 @ rot,
                             sigma_b=phi.sigma_b, u=phi.u)
    t2 = natural_of_envelope(phi_rot, gamma0=gamma0 @ rot)
    assert np.allclose(t1.sigma_eps, t2.sigma_eps, atol=1e-9)
    assert np.allclose(t1.beta, t2.beta)


def test_sigma_eps_spectrum_is_union_of_blocks():
    rng = np.random.default_rng(4)
    phi = random_envelope_params(rng, 6, 2, 1, u=2)
    theta = natural_of_envelope(phi)
    got = np.sort(np.linalg.eigvalsh(theta.sigma_eps))
    expected = np.sort(np.concatenate([np.linalg.eigvalsh(phi.omega),
                                       np.linalg.eigvalsh(phi.omega0)]))
    assert np.allclose(got, expected, atol=1e-9)
    assert got[0] > 0


def test_orth_complement_edges():
    assert orth_complement(np.zeros((4, 0))).shape == (4, 4)
    g, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((4, 4)))
    assert orth_complement(g).shape == (4, 0)
    g2 = g[:, :2]
    c = orth_complement(g2)
    assert np.allclose(c.T @ c, np.eye(2), atol=1e-12)
    assert np.allclose(c.T @ g2, 0.0, atol=1e-12)


def test_obs_loglik_scalar_closed_form():
    # n=1, J=1, q=1, Z=1, scalar covariances: Y ~ N(alpha + beta x, se + sb)
    theta = NaturalParams(alpha=[0.7], beta=[[1.5]], sigma_eps=[[0.6]], sigma_b=[[2.0]])
    data = LongitudinalDataset([np.array([[2.3]])], [np.array([[1.1]])],
                               [np.array([[1.0]])])
    var = 0.6 + 2.0
    resid = 2.3 - (0.7 + 1.5 * 1.1)
    expected = -0.5 * np.log(2 * np.pi * var) - 0.5 * resid ** 2 / var
    assert np.isclose(obs_loglik(theta, data), expected, rtol=1e-12)


def test_obs_loglik_vanishing_random_effects():
    rng = np.random.default_rng(6)
    r, p, q, n, J = 2, 2, 1, 4, 3
    data, theta = random_dataset(rng, n=n, r=r, p=p, q=q, J=J)
    theta_small = NaturalParams(alpha=theta.alpha, beta=theta.beta,
                                sigma_eps=theta.sigma_eps,
                                sigma_b=1e-12 * np.eye(q * r))
    # iid multivariate-normal likelihood of the per-observation residuals
    from scipy.stats import multivariate_normal
    total = 0.0
    for i in range(n):
        Y_i, X_i, _ = data.subject(i)
        resid = (Y_i - theta.alpha[:, None] - theta.beta @ X_i).T
        total += multivariate_normal.logpdf(resid, mean=np.zeros(r),
                                            cov=theta.sigma_eps).sum()
    assert np.isclose(obs_loglik(theta_small, data), total, rtol=1e-6)


def test_obs_loglik_matches_dense_oracle():
    rng = np.random.default_rng(7)
    for k in range(8):
        r = int(rng.integers(1, 4))
        p = int(rng.integers(1, 3))
        q = int(rng.integers(1, 3))
        data, theta = random_dataset(rng, n=3, r=r, p=p, q=q, J=3, unbalanced=True)
        got = obs_loglik(theta, data)
        want = dense_loglik_oracle(theta, data)
        assert np.isclose(got, want, rtol=1e-8), (k, got, want)


def test_obs_loglik_invariant_to_complement_choice():
    # (gamma0, omega0) and (gamma0 R, R^T omega0 R) describe the same model
    rng = np.random.default_rng(8)
    phi = random_envelope_params(rng, 4, 2, 1, u=2)
    data, _ = random_dataset(rng, n=3, r=4, p=2, q=1, J=2)
    g0a = orth_complement(phi.gamma)
    rot, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    phi_rot = EnvelopeParams(alpha=phi.alpha, gamma=phi.gamma, eta=phi.eta,
                             omega=phi.omega, omega0=rot.T @ phi.omega0 @ rot,
                             sigma_b=phi.sigma_b, u=phi.u)
    ll_a = obs_loglik(natural_of_envelope(phi, gamma0=g0a), data)
    ll_b = obs_loglik(natural_of_envelope(phi_rot, gamma0=g0a @ rot), data)
    assert np.isclose(ll_a, ll_b, atol=1e-9)


def test_obs_loglik_raises_on_singular_covariance():
    data, theta = random_dataset(np.random.default_rng(9), n=2, r=2, p=1, q=1, J=2)
    bad = NaturalParams(alpha=theta.alpha, beta=theta.beta,
                        sigma_eps=np.zeros((2, 2)), sigma_b=np.zeros((2, 2)))
    with pytest.raises(SingularCovarianceError):
        obs_loglik(bad, data)


def test_strict_conditions_zero_z():
    rng = np.random.default_rng(10)
    phi = random_envelope_params(rng, 3, 2, 1, u=1)
    theta = natural_of_envelope(phi)
    data, _ = random_dataset(rng, n=2, r=3, p=2, q=1, J=2, theta=theta)
    for i in range(data.n):
        data.Z[i][:] = 0.0
    rep = check_strict_conditions(phi, theta, data)
    assert rep["gamma0_beta"] <= 1e-10
    assert float(np.max(rep["z_kron_gamma0"])) == 0.0


def test_strict_conditions_intercept_z_violates_condition_two():
    rng = np.random.default_rng(11)
    phi = random_envelope_params(rng, 3, 2, 1, u=1)
    theta = natural_of_envelope(phi)
    data, _ = random_dataset(rng, n=2, r=3, p=2, q=1, J=2, theta=theta)
    for i in range(data.n):
        data.Z[i][:] = 1.0
    rep = check_strict_conditions(phi, theta, data)
    assert rep["gamma0_beta"] <= 1e-10
    # Z kron gamma0 has gamma0's own scale whenever Z is an intercept
    assert float(np.max(rep["z_kron_gamma0"])) == pytest.approx(
        float(np.max(np.abs(orth_complement(phi.gamma)))))
    assert not rep["within_tol"]


def test_strict_conditions_flag_unstructured_theta():
    rng = np.random.default_rng(12)
    phi = random_envelope_params(rng, 3, 2, 1, u=1)
    theta = random_params(rng, 3, 2, 1)
    data, _ = random_dataset(rng, n=2, r=3, p=2, q=1, J=2)
    rep = check_strict_conditions(phi, theta, data)
    assert rep["gamma0_beta"] > 1e-6


def test_simulate_balanced_main_structure():
    data, theta, phi = simulate(scenario_config("balanced_main", seed=77))
    assert (data.n, data.r, data.p, data.q) == (50, 10, 6, 2)
    assert np.all(data.J == 5)
    assert phi.u == 1
    # X rows 1-3 vary with time, rows 4-6 are per-subject constants
    for i in range(data.n):
        X_i = data.X[i]
        for row in range(3):
            assert np.ptp(X_i[row]) > 0
        for row in range(3, 6):
            assert np.ptp(X_i[row]) == 0.0
        assert np.all(data.Z[i][0] == 1.0)
        assert np.ptp(data.Z[i][1]) > 0
    # beta = P_gamma beta0 lies in span(gamma); omega/omega0 scales as configured
    assert np.allclose(projector(phi.gamma) @ theta.beta, theta.beta, atol=1e-9)
    assert np.allclose(phi.omega, 0.01 * np.eye(1))
    assert np.allclose(phi.omega0, 100.0 * np.eye(9))
    w = np.linalg.eigvalsh(theta.sigma_b)
    assert w[0] > 0


def test_simulate_unbalanced_main_j_distribution():
    data, _, _ = simulate(scenario_config("unbalanced_main", seed=78))
    assert set(np.unique(data.J)).issubset({5, 6, 7, 8, 9})
    assert len(set(data.J.tolist())) > 1
    assert not data.is_balanced()


def test_simulate_demo2d_structure():
    data, theta, phi = simulate(scenario_config("demo2d", seed=79))
    assert (data.n, data.r, data.p, data.q) == (2000, 2, 1, 1)
    assert np.allclose(theta.beta, [[-7.07], [7.07]], atol=1e-10)
    assert np.array_equal(theta.alpha, np.zeros(2))
    xs = np.concatenate([np.unique(x) for x in data.X])
    assert set(np.unique(xs)) == {0.0, 1.0}
    assert all(np.all(z == 1.0) for z in data.Z)
    assert phi.u == 1


def test_simulate_deterministic_and_seed_sensitive():
    cfg = scenario_config("balanced_main", seed=123)
    d1, t1, _ = simulate(cfg)
    d2, t2, _ = simulate(cfg)
    assert np.array_equal(d1.Yt, d2.Yt)
    assert np.array_equal(t1.beta, t2.beta)
    d3, _, _ = simulate(scenario_config("balanced_main", seed=124))
    assert not np.array_equal(d1.Yt, d3.Yt)


def test_simulate_param_seed_freezes_parameters():
    cfg = scenario_config("balanced_main", seed=1, param_seed=42)
    _, t1, _ = simulate(cfg)
    _, t2, _ = simulate(cfg.replace(seed=2))
    assert np.array_equal(t1.beta, t2.beta)
    assert np.array_equal(t1.sigma_b, t2.sigma_b)


def test_simulate_rng_algorithms_differ_but_both_reproduce():
    cfg = scenario_config("balanced_main", seed=5)
    d1, _, _ = simulate(cfg)
    d2, _, _ = simulate(cfg.replace(rng="philox"))
    assert not np.array_equal(d1.Yt, d2.Yt)
    d3, _, _ = simulate(cfg.replace(rng="philox"))
    assert np.array_equal(d2.Yt, d3.Yt)
    with pytest.raises(ValueError):
        simulate(cfg.replace(rng="mt19937"))


def test_envelope_of_span_reducing_subspace():
    rng = np.random.default_rng(13)
    # block-diagonal M with beta supported on the first block only
    g, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    w = np.array([1.0, 1.0, 3.0, 3.0, 3.0])
    m = g @ np.diag(w) @ g.T
    beta = g[:, :1] @ rng.standard_normal((1, 2))
    basis = envelope_of_span(m, beta)
    assert basis.shape[1] == 1
    assert np.allclose(projector(basis) @ beta, beta, atol=1e-9)
    # zero beta spans nothing
    assert envelope_of_span(m, np.zeros((5, 1))).shape == (5, 0)


def test_prop1_basis_single_time_point():
    rng = np.random.default_rng(14)
    phi = random_envelope_params(rng, 3, 2, 1, u=1)
    basis = prop1_basis(phi, J=1)
    theta = natural_of_envelope(phi)
    m = theta.sigma_eps + theta.sigma_b
    expected = envelope_of_span(m, theta.beta)
    assert np.allclose(projector(basis), projector(expected), atol=1e-10)


def test_prop1_basis_full_envelope_is_stacked_identity():
    # isotropic covariances make the envelope of a full-rank beta all of R^r
    r, p, J = 3, 3, 4
    phi = EnvelopeParams(alpha=np.zeros(r), gamma=np.eye(r),
                         eta=np.eye(r) + 0.3, omega=np.eye(r),
                         omega0=np.zeros((0, 0)), sigma_b=2.0 * np.eye(r), u=r)
    basis = prop1_basis(phi, J)
    expected = np.kron(np.ones((J, 1)), np.eye(r)) / np.sqrt(J)
    assert np.allclose(projector(basis), projector(expected), atol=1e-10)
    assert np.allclose(basis.T @ basis, np.eye(r), atol=1e-10)


def test_prop1_basis_contains_stacked_beta_span():
    rng = np.random.default_rng(15)
    r, J = 3, 5
    phi = random_envelope_params(rng, r, 2, 1, u=1)
    theta = natural_of_envelope(phi)
    basis = prop1_basis(phi, J)
    stacked = np.kron(np.ones((J, 1)), theta.beta)
    resid = stacked - projector(basis) @ stacked
    assert np.max(np.abs(resid)) < 1e-8
    # the vectorized-model envelope dimension never exceeds r
    assert basis.shape[1] <= r


def test_prop1_basis_requires_random_intercept():
    rng = np.random.default_rng(16)
    phi = random_envelope_params(rng, 3, 2, 2, u=1)  # q=2: sigma_b is 6x6
    with pytest.raises(ValueError):
        prop1_basis(phi, J=2)

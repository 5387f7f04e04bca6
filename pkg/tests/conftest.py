"""Shared test helpers: small random instances and dense-Gaussian oracles.

The oracles here deliberately avoid the library's own evaluation paths:
per-subject covariances are assembled as dense (r J_i) x (r J_i) matrices
and densities evaluated through scipy, so likelihood/E-step tests compare
two independent routes to the same quantity.
"""

import numpy as np
from scipy.stats import multivariate_normal

from mixenv.model import LongitudinalDataset, NaturalParams, EnvelopeParams


def random_pd(rng, dim, jitter=0.5):
    a = rng.standard_normal((dim, dim))
    return a @ a.T + jitter * np.eye(dim)


def random_params(rng, r, p, q, beta_scale=1.0):
    return NaturalParams(
        alpha=rng.standard_normal(r),
        beta=beta_scale * rng.standard_normal((r, p)),
        sigma_eps=random_pd(rng, r),
        sigma_b=random_pd(rng, q * r),
    )


def random_dataset(rng, n=6, r=2, p=2, q=1, J=3, theta=None, unbalanced=False):
    """Draw a dataset from the model at theta (defaults to a random draw)."""
    if theta is None:
        theta = random_params(rng, r, p, q)
    L_b = np.linalg.cholesky(theta.sigma_b)
    L_e = np.linalg.cholesky(theta.sigma_eps)
    Ys, Xs, Zs = [], [], []
    for i in range(n):
        J_i = int(rng.integers(max(1, J - 1), J + 2)) if unbalanced else J
        X_i = rng.standard_normal((p, J_i))
        Z_i = rng.standard_normal((q, J_i))
        b = (L_b @ rng.standard_normal(q * r)).reshape(r, q, order="F")
        eps = L_e @ rng.standard_normal((r, J_i))
        Y_i = theta.alpha[:, None] + theta.beta @ X_i + b @ Z_i + eps
        Ys.append(Y_i)
        Xs.append(X_i)
        Zs.append(Z_i)
    return LongitudinalDataset(Ys, Xs, Zs), theta


def random_envelope_params(rng, r, p, q, u, omega_scale=1.0, omega0_scale=1.0):
    gamma, _ = np.linalg.qr(rng.standard_normal((r, max(u, 1))))
    gamma = gamma[:, :u]
    return EnvelopeParams(
        alpha=rng.standard_normal(r),
        gamma=gamma,
        eta=rng.standard_normal((u, p)),
        omega=omega_scale * random_pd(rng, u, jitter=0.2),
        omega0=omega0_scale * random_pd(rng, r - u, jitter=0.2),
        sigma_b=random_pd(rng, q * r),
        u=u,
    )


def subject_dense_covariance(theta, Z_i):
    """Dense (r J_i) x (r J_i) covariance I kron sigma_eps + A sigma_b A^T,
    with A = Z_i^T kron I_r, assembled without any library shortcut."""
    r = theta.sigma_eps.shape[0]
    J_i = Z_i.shape[1]
    a = np.kron(Z_i.T, np.eye(r))
    return np.kron(np.eye(J_i), theta.sigma_eps) + a @ theta.sigma_b @ a.T


def subject_mean(theta, X_i):
    """vec of alpha 1^T + beta X_i (column-major stacking)."""
    m = theta.alpha[:, None] + theta.beta @ X_i
    return m.reshape(-1, order="F")


def dense_loglik_oracle(theta, data):
    """Observed-data log-likelihood via scipy's dense multivariate normal."""
    total = 0.0
    for i in range(data.n):
        Y_i, X_i, Z_i = data.subject(i)
        cov = subject_dense_covariance(theta, Z_i)
        mean = subject_mean(theta, X_i)
        total += multivariate_normal.logpdf(Y_i.reshape(-1, order="F"), mean=mean, cov=cov)
    return float(total)


def dense_posterior_oracle(theta, data, i):
    """Posterior mean/covariance of vec(b_i) by dense joint-Gaussian conditioning.

    Cov(vec b, vec Y) = sigma_b A^T; conditioning the joint normal of
    (vec b_i, vec Y_i) on the observed vec Y_i.
    """
    Y_i, X_i, Z_i = data.subject(i)
    r = data.r
    a = np.kron(Z_i.T, np.eye(r))
    cov_yy = subject_dense_covariance(theta, Z_i)
    cov_by = theta.sigma_b @ a.T
    resid = Y_i.reshape(-1, order="F") - subject_mean(theta, X_i)
    gain = cov_by @ np.linalg.inv(cov_yy)
    mu = gain @ resid
    sigma = theta.sigma_b - gain @ cov_by.T
    return mu, 0.5 * (sigma + sigma.T)

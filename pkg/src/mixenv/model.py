"""Data containers, parameterizations, observed-data likelihood and simulators.

The longitudinal model: for subject i at time j,

    Y_ij = alpha + beta X_ij + b_i Z_ij + eps_ij,

with vec(b_i) ~ N(0, sigma_b) of size qr and eps_ij ~ N(0, sigma_eps) of
size r.  Writing A_ij = Z_ij^T kron I_r (so that b_i Z_ij = A_ij vec(b_i)),
the stacked response vec(Y_i) is Gaussian with covariance
Sigma_i = I_{J_i} kron sigma_eps + A_i sigma_b A_i^T.

The envelope parameterization constrains beta = gamma @ eta and
sigma_eps = gamma omega gamma^T + gamma0 omega0 gamma0^T for a
semi-orthogonal r x u basis gamma.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import matkit
from . import kernels
from .errors import SingularCovarianceError, DataFormatError


class LongitudinalDataset:
    """Per-subject response/predictor blocks with possibly unequal J_i.

    Parameters
    ----------
    Y : list of (r, J_i) arrays
    X : list of (p, J_i) arrays
    Z : list of (q, J_i) arrays

    Builds observation-major concatenations (Yt, Xt, Zt of shape
    (J_total, dim)) and a subj_ptr offset array for the kernels.
    """

    def __init__(self, Y, X, Z):
        if not (len(Y) == len(X) == len(Z)) or len(Y) == 0:
            raise DataFormatError("need equal, nonzero numbers of Y/X/Z blocks")
        self.Y = [np.atleast_2d(np.asarray(a, dtype=float)) for a in Y]
        self.X = [np.atleast_2d(np.asarray(a, dtype=float)) for a in X]
        self.Z = [np.atleast_2d(np.asarray(a, dtype=float)) for a in Z]
        self.n = len(self.Y)
        self.r = self.Y[0].shape[0]
        self.p = self.X[0].shape[0]
        self.q = self.Z[0].shape[0]
        J = []
        for i in range(self.n):
            ji = self.Y[i].shape[1]
            if ji < 1:
                raise DataFormatError("subject %d has no observations" % i)
            if self.Y[i].shape[0] != self.r or self.X[i].shape[0] != self.p or self.Z[i].shape[0] != self.q:
                raise DataFormatError("inconsistent row dimensions at subject %d" % i)
            if self.X[i].shape[1] != ji or self.Z[i].shape[1] != ji:
                raise DataFormatError("column counts of Y/X/Z disagree at subject %d" % i)
            J.append(ji)
        self.J = np.asarray(J, dtype=np.int64)
        self.J_total = int(self.J.sum())
        self.Yt = np.ascontiguousarray(np.concatenate([a.T for a in self.Y], axis=0))
        self.Xt = np.ascontiguousarray(np.concatenate([a.T for a in self.X], axis=0))
        self.Zt = np.ascontiguousarray(np.concatenate([a.T for a in self.Z], axis=0))
        if not (np.isfinite(self.Yt).all() and np.isfinite(self.Xt).all() and np.isfinite(self.Zt).all()):
            raise DataFormatError("non-finite entries in dataset")
        self.subj_ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(self.J, out=self.subj_ptr[1:])
        self.latent_b = None  # optionally attached by simulate(keep_latents=True)

    def subject(self, i):
        """(Y_i, X_i, Z_i) for subject i."""
        return self.Y[i], self.X[i], self.Z[i]

    def subset(self, indices):
        """New dataset made of the given subjects (repeats allowed, for bootstrap)."""
        idx = list(indices)
        return LongitudinalDataset(
            [self.Y[i] for i in idx], [self.X[i] for i in idx], [self.Z[i] for i in idx]
        )

    def is_balanced(self):
        return bool(np.all(self.J == self.J[0]))


@dataclass
class NaturalParams:
    """Standard mixed-model parameterization (alpha, beta, sigma_eps, sigma_b)."""

    alpha: np.ndarray       # (r,)
    beta: np.ndarray        # (r, p)
    sigma_eps: np.ndarray   # (r, r) PD
    sigma_b: np.ndarray     # (qr, qr) PD

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.sigma_eps = np.atleast_2d(np.asarray(self.sigma_eps, dtype=float))
        self.sigma_b = np.atleast_2d(np.asarray(self.sigma_b, dtype=float))


@dataclass
class EnvelopeParams:
    """Envelope parameterization (alpha, gamma, eta, omega, omega0, sigma_b) with dimension u.

    gamma is r x u semi-orthogonal; u = 0 encodes the null envelope
    (beta identically zero, sigma_eps = omega0).
    """

    alpha: np.ndarray    # (r,)
    gamma: np.ndarray    # (r, u)
    eta: np.ndarray      # (u, p)
    omega: np.ndarray    # (u, u) PD
    omega0: np.ndarray   # (r-u, r-u) PD
    sigma_b: np.ndarray  # (qr, qr) PD
    u: int

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(len(self.alpha), -1)
        self.eta = np.asarray(self.eta, dtype=float)
        if self.eta.ndim == 1:
            self.eta = self.eta.reshape(self.u, -1)
        self.omega = np.asarray(self.omega, dtype=float).reshape(self.u, self.u)
        k = len(self.alpha) - self.u
        self.omega0 = np.asarray(self.omega0, dtype=float).reshape(k, k)
        self.sigma_b = np.atleast_2d(np.asarray(self.sigma_b, dtype=float))


@dataclass
class SimulationConfig:
    """Scenario description for simulate().

    J is either a fixed integer (balanced) or a tuple of integers from
    which each J_i is drawn uniformly.  n_time_varying_x gives the number
    of leading X rows that get a fresh draw at every time point; the
    remaining rows are constant within subject.  rng picks the generator
    algorithm by name ('pcg64' or 'philox').
    """

    scenario: str = "custom"
    n: int = 50
    r: int = 10
    p: int = 6
    q: int = 2
    u: int = 1
    J: object = 5
    seed: int = 0
    rng: str = "pcg64"
    gamma_range: tuple = (0.0, 1.0)
    beta0_range: tuple = (-10.0, 10.0)
    b_range: tuple = (-10.0, 10.0)
    omega_scale: float = 0.01
    omega0_scale: float = 100.0
    x_range: tuple = (-10.0, 10.0)
    z_range: tuple = (-10.0, 10.0)
    n_time_varying_x: int = 3
    z_intercept: bool = True
    param_seed: object = None   # set to an int to freeze parameters across seeds
    keep_latents: bool = False

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def scenario_config(name, seed, **overrides):
    """Preset SimulationConfig for the named scenario.

    Scenarios: 'balanced_main' (n=50, r=10, J=5, p=6, q=2, u=1),
    'unbalanced_main' (same with J_i uniform on {5..9}), and 'demo2d'
    (n=2000, r=2, J=5, two groups; fixed parameters).
    """
    if name == "balanced_main":
        cfg = SimulationConfig(scenario="balanced_main", n=50, r=10, p=6, q=2, u=1, J=5, seed=seed)
    elif name == "unbalanced_main":
        cfg = SimulationConfig(scenario="unbalanced_main", n=50, r=10, p=6, q=2, u=1,
                               J=(5, 6, 7, 8, 9), seed=seed)
    elif name == "demo2d":
        cfg = SimulationConfig(scenario="demo2d", n=2000, r=2, p=1, q=1, u=1, J=5, seed=seed)
    else:
        raise ValueError("unknown scenario %r" % (name,))
    return cfg.replace(**overrides) if overrides else cfg


def orth_complement(gamma, r=None):
    """Orthonormal basis of the orthogonal complement of span(gamma) in R^r."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 1:
        gamma = gamma[:, None]
    if r is None:
        r = gamma.shape[0]
    u = gamma.shape[1]
    if u == 0:
        return np.eye(r)
    if u == r:
        return np.zeros((r, 0))
    full, _, _ = np.linalg.svd(gamma, full_matrices=True)
    return full[:, u:]


def natural_of_envelope(phi, gamma0=None):
    """Map envelope parameters to the standard parameterization.

    beta = gamma eta, sigma_eps = gamma omega gamma^T + gamma0 omega0 gamma0^T.
    gamma0 defaults to a computed orthonormal complement of gamma; passing an
    explicit gamma0 pins the complement (useful for smooth perturbation
    studies -- the result is invariant to the choice up to rotation of
    omega0's coordinates).
    """
    r = phi.alpha.shape[0]
    p = phi.eta.shape[1]
    if phi.u == 0:
        beta = np.zeros((r, p))
        sigma_eps = phi.omega0.copy()
    else:
        beta = phi.gamma @ phi.eta
        if gamma0 is None:
            gamma0 = orth_complement(phi.gamma, r)
        sigma_eps = phi.gamma @ phi.omega @ phi.gamma.T + gamma0 @ phi.omega0 @ gamma0.T
        sigma_eps = 0.5 * (sigma_eps + sigma_eps.T)
    return NaturalParams(alpha=phi.alpha.copy(), beta=beta,
                         sigma_eps=sigma_eps, sigma_b=phi.sigma_b.copy())


def obs_loglik(theta, data):
    """Exact observed-data Gaussian log-likelihood (full constants).

    Sum over subjects of the N(mean_i, Sigma_i) log-density of vec(Y_i),
    Sigma_i = I_{J_i} kron sigma_eps + A_i sigma_b A_i^T, evaluated through
    a dense per-subject Cholesky factorization.

    Raises SingularCovarianceError when some Sigma_i is not numerically PD.
    """
    total, status = kernels.obs_loglik_parts(
        data.Yt, data.Xt, data.Zt, data.subj_ptr,
        np.ascontiguousarray(theta.alpha, dtype=float),
        np.ascontiguousarray(theta.beta, dtype=float),
        np.ascontiguousarray(theta.sigma_eps, dtype=float),
        np.ascontiguousarray(theta.sigma_b, dtype=float),
    )
    if status != 0:
        raise SingularCovarianceError("per-subject covariance is not positive definite")
    return float(total)


def check_strict_conditions(phi, theta, data, tol=1e-8):
    """Diagnostics for the strengthened envelope conditions.

    Reports the maximum absolute violation of
      (1) gamma0^T beta = 0,
      (2) Z_i kron gamma0 = 0, and
      (3) I_{J_i} kron (gamma^T sigma_eps gamma0)
          + (Z_i^T kron gamma^T) sigma_b (Z_i kron gamma0) = 0
    per subject.  Condition (2) can only hold when Z or gamma0 vanishes,
    which is the point of checking it.
    """
    r = data.r
    gamma = phi.gamma
    gamma0 = orth_complement(gamma, r)
    v1 = 0.0 if phi.u == 0 else float(np.max(np.abs(gamma0.T @ theta.beta), initial=0.0))
    v2 = np.zeros(data.n)
    v3 = np.zeros(data.n)
    cross = gamma.T @ theta.sigma_eps @ gamma0
    for i in range(data.n):
        z = data.Z[i]
        v2[i] = float(np.max(np.abs(np.kron(z, gamma0)), initial=0.0))
        term = np.kron(np.eye(data.J[i]), cross) + \
            np.kron(z.T, gamma.T) @ theta.sigma_b @ np.kron(z, gamma0)
        v3[i] = float(np.max(np.abs(term), initial=0.0))
    return {
        "gamma0_beta": v1,
        "z_kron_gamma0": v2,
        "cross_covariance": v3,
        "max_violation": max(v1, float(v2.max()), float(v3.max())),
        "within_tol": bool(max(v1, float(v2.max()), float(v3.max())) <= tol),
    }


def _make_rng(algorithm, seed):
    if algorithm == "pcg64":
        return np.random.Generator(np.random.PCG64(seed))
    if algorithm == "philox":
        return np.random.Generator(np.random.Philox(seed))
    raise ValueError("unknown rng algorithm %r" % (algorithm,))


def _orthonormalize(a):
    """QR-based orthonormal basis with deterministic signs (R diagonal > 0)."""
    qmat, rmat = np.linalg.qr(a)
    signs = np.sign(np.diag(rmat))
    signs[signs == 0] = 1.0
    return qmat * signs


def _draw_scenario_params(cfg, rng):
    """Parameter draws for the envelope-structured scenarios.

    Draw order: gamma raw U(gamma_range) (r x u, then orthonormalized),
    beta0 U(beta0_range) (r x p), B U(b_range) (qr x qr).  Then
    beta = P_gamma beta0, sigma_b = B B^T, omega/omega0 scaled identities.
    """
    r, p, q, u = cfg.r, cfg.p, cfg.q, cfg.u
    gamma_raw = rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1], size=(r, u))
    gamma = _orthonormalize(gamma_raw) if u > 0 else np.zeros((r, 0))
    beta0 = rng.uniform(cfg.beta0_range[0], cfg.beta0_range[1], size=(r, p))
    bmat = rng.uniform(cfg.b_range[0], cfg.b_range[1], size=(q * r, q * r))
    sigma_b = bmat @ bmat.T
    eta = gamma.T @ beta0
    omega = cfg.omega_scale * np.eye(u)
    omega0 = cfg.omega0_scale * np.eye(r - u)
    phi = EnvelopeParams(alpha=np.zeros(r), gamma=gamma, eta=eta, omega=omega,
                         omega0=omega0, sigma_b=sigma_b, u=u)
    return phi


def _demo2d_params():
    """Fixed parameters of the two-group bivariate illustration.

    Group difference beta = (-7.07, 7.07)^T lies on the envelope direction
    (-1, 1)/sqrt(2); the error variance along that direction is omega = 4
    versus omega0 = 196 orthogonal to it, and the random-intercept
    covariance is deliberately not aligned with the envelope.
    """
    g = 1.0 / np.sqrt(2.0)
    gamma = np.array([[-g], [g]])
    eta = np.array([[14.14 * g]])
    omega = np.array([[4.0]])
    omega0 = np.array([[196.0]])
    sigma_b = np.array([[517.0, 100.0], [100.0, 423.0]])
    return EnvelopeParams(alpha=np.zeros(2), gamma=gamma, eta=eta, omega=omega,
                          omega0=omega0, sigma_b=sigma_b, u=1)


def simulate(config):
    """Draw (dataset, true NaturalParams, true EnvelopeParams) for a scenario.

    Deterministic given (config.seed, config.rng).  Draw order is fixed and
    documented: parameters first (see _draw_scenario_params; demo2d uses
    fixed parameters and draws nothing), then per subject i in order:
    J_i (only when config.J is a set), X_i (time-varying rows, then
    subject-constant rows), Z_i (non-intercept rows), vec(b_i) as
    chol(sigma_b) @ standard normals, then eps as chol(sigma_eps) @ a
    standard normal (r, J_i) block.  When config.param_seed is set the
    parameters come from their own generator so replicates can share them.
    """
    cfg = config
    rng = _make_rng(cfg.rng, cfg.seed)
    if cfg.scenario == "demo2d":
        phi = _demo2d_params()
        r, p, q = 2, 1, 1
        n = cfg.n
        J = cfg.J if isinstance(cfg.J, int) else 5
        theta = natural_of_envelope(phi)
        L_b = np.linalg.cholesky(theta.sigma_b)
        L_e = np.linalg.cholesky(theta.sigma_eps)
        n0 = n // 2
        Ys, Xs, Zs, bs = [], [], [], []
        for i in range(n):
            x = 0.0 if i < n0 else 1.0
            X_i = np.full((p, J), x)
            Z_i = np.ones((q, J))
            b = L_b @ rng.standard_normal(q * r)
            eps = L_e @ rng.standard_normal((r, J))
            b_mat = b.reshape(r, q, order="F")
            Y_i = theta.alpha[:, None] + theta.beta @ X_i + b_mat @ Z_i + eps
            Ys.append(Y_i)
            Xs.append(X_i)
            Zs.append(Z_i)
            bs.append(b)
        data = LongitudinalDataset(Ys, Xs, Zs)
        if cfg.keep_latents:
            data.latent_b = bs
        return data, theta, phi

    # envelope-structured scenarios: balanced_main / unbalanced_main / custom
    param_rng = rng if cfg.param_seed is None else _make_rng(cfg.rng, cfg.param_seed)
    phi = _draw_scenario_params(cfg, param_rng)
    theta = natural_of_envelope(phi)
    r, p, q = cfg.r, cfg.p, cfg.q
    L_b = np.linalg.cholesky(theta.sigma_b)
    L_e = np.linalg.cholesky(theta.sigma_eps)
    n_tv = min(cfg.n_time_varying_x, p)
    Ys, Xs, Zs, bs = [], [], [], []
    for i in range(cfg.n):
        if isinstance(cfg.J, int):
            J_i = cfg.J
        else:
            choices = np.asarray(cfg.J, dtype=np.int64)
            J_i = int(choices[rng.integers(0, len(choices))])
        X_i = np.empty((p, J_i))
        if n_tv > 0:
            X_i[:n_tv] = rng.uniform(cfg.x_range[0], cfg.x_range[1], size=(n_tv, J_i))
        if p - n_tv > 0:
            X_i[n_tv:] = rng.uniform(cfg.x_range[0], cfg.x_range[1], size=(p - n_tv, 1))
        Z_i = np.empty((q, J_i))
        row0 = 0
        if cfg.z_intercept:
            Z_i[0] = 1.0
            row0 = 1
        if q - row0 > 0:
            Z_i[row0:] = rng.uniform(cfg.z_range[0], cfg.z_range[1], size=(q - row0, J_i))
        b = L_b @ rng.standard_normal(q * r)
        eps = L_e @ rng.standard_normal((r, J_i))
        b_mat = b.reshape(r, q, order="F")
        Y_i = theta.alpha[:, None] + theta.beta @ X_i + b_mat @ Z_i + eps
        Ys.append(Y_i)
        Xs.append(X_i)
        Zs.append(Z_i)
        bs.append(b)
    data = LongitudinalDataset(Ys, Xs, Zs)
    if cfg.keep_latents:
        data.latent_b = bs
    return data, theta, phi


def envelope_of_span(m, b, tol=1e-9):
    """Basis of the M-envelope of span(B): the smallest reducing subspace
    of M containing span(B), found by eigenspace decomposition.

    Eigenvalues of M are clustered to relative tolerance; for each
    eigenspace with a nonzero projection of B, that projected block
    contributes its column space.
    """
    m = np.asarray(m, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    scale = max(abs(w[0]), abs(w[-1]), 1e-300)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros((m.shape[0], 0))
    pieces = []
    start = 0
    for j in range(1, len(w) + 1):
        if j == len(w) or abs(w[j] - w[start]) > tol * scale:
            vl = v[:, start:j]
            t = vl @ (vl.T @ b)
            sv = np.linalg.svd(t, compute_uv=False)
            if sv.size and sv[0] > tol * bnorm:
                basis_u, basis_s, _ = np.linalg.svd(t, full_matrices=False)
                keep = basis_s > tol * basis_s[0]
                pieces.append(basis_u[:, keep])
            start = j
    if not pieces:
        return np.zeros((m.shape[0], 0))
    phi = np.concatenate(pieces, axis=1)
    # columns from different eigenspaces are already orthogonal; tidy anyway
    return _orthonormalize(phi)


def prop1_basis(phi_small, J):
    """Envelope basis of the balanced vectorized model: (1_J kron Phi)/sqrt(J).

    phi_small holds the per-time-point envelope parameters of a balanced
    random-intercept model with time-invariant predictors; Phi is the basis
    of the (sigma_eps/J + sigma_b)-envelope of span(beta).  The returned
    matrix is semi-orthogonal of shape (rJ, dim(Phi)).
    """
    theta = natural_of_envelope(phi_small)
    r = theta.alpha.shape[0]
    if theta.sigma_b.shape != (r, r):
        raise ValueError("prop1_basis expects a random-intercept model (q = 1)")
    m = theta.sigma_eps / float(J) + theta.sigma_b
    phi_mat = envelope_of_span(m, theta.beta)
    ones = np.ones((J, 1))
    return np.kron(ones, phi_mat) / np.sqrt(float(J))

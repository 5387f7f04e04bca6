"""Asymptotic and bootstrap inference for the mixed effects (envelope)
model.

Natural-parameter coordinates throughout: theta = (vec beta, vech sigma_eps,
vech sigma_b), with vec column-major and vech scanning the lower triangle
column by column.  The mean block is information-orthogonal to the two
covariance blocks, so the Fisher matrix is block diagonal in (1) vs (2, 3).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InformationSingularityError,
    RankDeficientDesignError,
    SingularCovarianceError,
    UnstableBootstrapError,
)
from .matkit import vech_dim, pinv
from .model import natural_of_envelope, orth_complement
from . import matkit


def _vech_pairs(r):
    """Lower-triangle index pairs (row >= col) in vech order."""
    return [(a, b) for b in range(r) for a in range(b, r)]


def _sym_basis(r):
    """Symmetric basis matrices S_j with d vech -> d matrix: S has a 1 at the
    (a, b) and (b, a) positions for the j-th vech coordinate."""
    pairs = _vech_pairs(r)
    out = np.zeros((len(pairs), r, r))
    for j, (a, b) in enumerate(pairs):
        out[j, a, b] = 1.0
        out[j, b, a] = 1.0
    return out


def _subject_structure(theta, z, r, q):
    """Per-subject covariance, its inverse, and the stacked derivative
    matrices of sigma_i w.r.t. vech(sigma_eps) and vech(sigma_b)."""
    j = z.shape[1]
    a_mat = np.kron(z.T, np.eye(r))  # (J r, q r)
    sigma = np.kron(np.eye(j), theta.sigma_eps) + a_mat @ theta.sigma_b @ a_mat.T
    sigma = 0.5 * (sigma + sigma.T)
    try:
        low = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("marginal covariance is not positive definite")
    siginv = np.linalg.solve(low.T, np.linalg.solve(low, np.eye(j * r)))
    siginv = 0.5 * (siginv + siginv.T)

    d_eps = np.stack([np.kron(np.eye(j), s) for s in _sym_basis(r)])
    d_b = np.stack([a_mat @ s @ a_mat.T for s in _sym_basis(q * r)])
    return sigma, siginv, d_eps, d_b


@dataclass
class FisherBlocks:
    """Fisher information of one dataset (summed over subjects), stored by
    block; the mean/covariance cross blocks are identically zero."""

    I11: np.ndarray  # (rp, rp)
    I22: np.ndarray  # (d_eps, d_eps)
    I23: np.ndarray  # (d_eps, d_b)
    I33: np.ndarray  # (d_b, d_b)

    def assembled(self):
        k1 = self.I11.shape[0]
        k2 = self.I22.shape[0]
        k3 = self.I33.shape[0]
        out = np.zeros((k1 + k2 + k3, k1 + k2 + k3))
        out[:k1, :k1] = self.I11
        out[k1:k1 + k2, k1:k1 + k2] = self.I22
        out[k1:k1 + k2, k1 + k2:] = self.I23
        out[k1 + k2:, k1:k1 + k2] = self.I23.T
        out[k1 + k2:, k1 + k2:] = self.I33
        return out


def fisher_info(theta, data):
    """Expected information about (vec beta, vech sigma_eps, vech sigma_b),
    summed over subjects.

    Mean block: I11 = sum_i (X_i kron I_r) sigma_i^{-1} (X_i^T kron I_r).
    Covariance blocks: (1/2) tr(sigma_i^{-1} D_j sigma_i^{-1} D_k) with D_*
    the derivative of sigma_i along the corresponding vech coordinate.
    Subjects sharing (J_i, Z_i) share everything except I11's X factor, so
    those blocks are computed once per distinct key.
    """
    r, p, q = data.r, data.p, data.q
    d_eps = vech_dim(r)
    d_b = vech_dim(q * r)
    i11 = np.zeros((r * p, r * p))
    i22 = np.zeros((d_eps, d_eps))
    i23 = np.zeros((d_eps, d_b))
    i33 = np.zeros((d_b, d_b))
    cache = {}
    for i in range(data.n):
        z = data.Z[i]
        key = (z.shape[1], z.tobytes())
        if key not in cache:
            _, siginv, dep, db = _subject_structure(theta, z, r, q)
            stacked = np.concatenate([dep, db])
            m = stacked.shape[0]
            flat = stacked.reshape(m, -1)
            wflat = np.einsum("ab,jbc,cd->jad", siginv, stacked, siginv).reshape(m, -1)
            block = 0.5 * (wflat @ flat.T)
            cache[key] = (siginv, block)
        siginv, block = cache[key]
        i22 += block[:d_eps, :d_eps]
        i23 += block[:d_eps, d_eps:]
        i33 += block[d_eps:, d_eps:]
        xk = np.kron(data.X[i], np.eye(r))  # (pr, J r)
        i11 += xk @ siginv @ xk.T
    return FisherBlocks(I11=0.5 * (i11 + i11.T), I22=0.5 * (i22 + i22.T),
                        I23=i23, I33=0.5 * (i33 + i33.T))


def score_contributions(theta, data):
    """Per-subject score vectors, one row per subject, columns ordered as
    (vec beta, vech sigma_eps, vech sigma_b)."""
    r, p, q = data.r, data.p, data.q
    d_eps = vech_dim(r)
    d_b = vech_dim(q * r)
    k = r * p + d_eps + d_b
    out = np.empty((data.n, k))
    cache = {}
    for i in range(data.n):
        z = data.Z[i]
        key = (z.shape[1], z.tobytes())
        if key not in cache:
            _, siginv, dep, db = _subject_structure(theta, z, r, q)
            cache[key] = (siginv, dep, db)
        siginv, dep, db = cache[key]
        s, e = data.subj_ptr[i], data.subj_ptr[i + 1]
        resid = data.Yt[s:e] - theta.alpha - data.Xt[s:e] @ theta.beta.T
        d_i = resid.reshape(-1)
        sd = siginv @ d_i
        smat = np.outer(sd, sd) - siginv
        xk = np.kron(data.X[i], np.eye(r))
        out[i, :r * p] = xk @ sd
        out[i, r * p:r * p + d_eps] = 0.5 * np.einsum("jab,ab->j", dep, smat)
        out[i, r * p + d_eps:] = 0.5 * np.einsum("jab,ab->j", db, smat)
    return out


@dataclass
class GradientG:
    """Jacobian of the natural parameters w.r.t. the envelope parameters,
    with named row/column slices into the matrix."""

    matrix: np.ndarray
    row_slices: dict = field(default_factory=dict)
    col_slices: dict = field(default_factory=dict)


def gradient_G(phi):
    """d(vec beta, vech sigma_eps, vech sigma_b) / d(vec eta, vec gamma,
    vech omega, vech omega0, vech sigma_b).

    The gamma column block differentiates the smooth extension that pins the
    complement: sigma_eps(gamma) = gamma omega gamma^T
    + (I - gamma gamma^T) gamma0 omega0 gamma0^T (I - gamma gamma^T), whose
    derivative at the point itself is
    d sigma_eps = B + B^T, B = d_gamma omega gamma^T
                              - gamma0 omega0 gamma0^T d_gamma gamma^T.
    """
    r = phi.gamma.shape[0]
    u = phi.u
    p = phi.eta.shape[1]
    qr = phi.sigma_b.shape[0]
    d_eps = vech_dim(r)
    d_b = vech_dim(qr)
    du = vech_dim(u)
    du0 = vech_dim(r - u)

    rows = {
        "beta": slice(0, r * p),
        "sigma_eps": slice(r * p, r * p + d_eps),
        "sigma_b": slice(r * p + d_eps, r * p + d_eps + d_b),
    }
    c0 = 0
    cols = {}
    for name, width in (("eta", u * p), ("gamma", r * u), ("omega", du),
                        ("omega0", du0), ("sigma_b", d_b)):
        cols[name] = slice(c0, c0 + width)
        c0 += width
    g = np.zeros((r * p + d_eps + d_b, c0))

    gamma = phi.gamma
    gamma0 = orth_complement(gamma, r)
    cr = matkit.contraction_matrix(r)
    krr = matkit.commutation_matrix(r, r)
    sym = cr @ (np.eye(r * r) + krr)

    g[rows["beta"], cols["eta"]] = np.kron(np.eye(p), gamma)
    g[rows["beta"], cols["gamma"]] = np.kron(phi.eta.T, np.eye(r))
    s0 = gamma0 @ phi.omega0 @ gamma0.T
    g[rows["sigma_eps"], cols["gamma"]] = sym @ (
        np.kron(gamma @ phi.omega, np.eye(r)) - np.kron(gamma, s0))
    g[rows["sigma_eps"], cols["omega"]] = cr @ np.kron(gamma, gamma) @ \
        matkit.expansion_matrix(u)
    g[rows["sigma_eps"], cols["omega0"]] = cr @ np.kron(gamma0, gamma0) @ \
        matkit.expansion_matrix(r - u)
    g[rows["sigma_b"], cols["sigma_b"]] = np.eye(d_b)
    return GradientG(matrix=g, row_slices=rows, col_slices=cols)


def _as_info_matrix(info):
    return info.assembled() if isinstance(info, FisherBlocks) else np.asarray(info, float)


def _pd_inverse(mat, what):
    try:
        low = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise InformationSingularityError("%s is not positive definite" % what)
    inv = np.linalg.solve(low.T, np.linalg.solve(low, np.eye(mat.shape[0])))
    return 0.5 * (inv + inv.T)


def avar_em(info):
    """Asymptotic covariance of the unconstrained estimator: the inverse of
    the supplied information (FisherBlocks or matrix).  Pass the per-subject
    average to get the covariance of sqrt(n) (estimate - truth)."""
    return _pd_inverse(_as_info_matrix(info), "Fisher information")


def avar_envelope(info, G):
    """Asymptotic covariance of the envelope estimator in the natural
    coordinates: G (G^T J G)^+ G^T, with G the envelope Jacobian (GradientG
    or matrix) and a pseudo-inverse absorbing the overparameterization."""
    jmat = _as_info_matrix(info)
    _pd_inverse(jmat, "Fisher information")  # fail fast when singular
    g = G.matrix if isinstance(G, GradientG) else np.asarray(G, float)
    inner = g.T @ jmat @ g
    out = g @ pinv(0.5 * (inner + inner.T)) @ g.T
    return 0.5 * (out + out.T)


def closed_form_avar_special(sigma1sq, sigma0sq, sigma_bsq, sigma_x1sq, sigma_x2sq):
    """Closed-form asymptotic variances of the two coefficient entries in
    the analytically tractable configuration: two responses, two visits,
    one scalar covariate, random intercept sigma_bsq * I_2, error
    diag(sigma1sq, sigma0sq), and the coefficient along the first axis.

    sigma_x1sq is the mean squared visit difference of the covariate,
    sigma_x2sq the mean sum of squares over visits.  Returns
    (avar_em, avar_env, ratio22): both 2 x 2 diagonal matrices, and the
    variance ratio of the second (immaterial) coordinate, which is 1 when
    the two error variances coincide.
    """
    def em_diag(ssq):
        return ssq * (ssq + 2.0 * sigma_bsq) / (
            sigma_bsq * sigma_x1sq + ssq * sigma_x2sq)

    em11 = em_diag(sigma1sq)
    em22 = em_diag(sigma0sq)
    num = 4.0 * (sigma1sq - sigma0sq) ** 2 * (
        sigma1sq * sigma0sq + 2.0 * sigma1sq * sigma_bsq
        + sigma0sq * sigma_bsq + 2.0 * sigma_bsq ** 2)
    den = sigma1sq * (sigma1sq + 2.0 * sigma_bsq) * (
        sigma_bsq * sigma_x1sq + sigma0sq * sigma_x2sq)
    ratio22 = 1.0 + num / den
    avar_em_mat = np.diag([em11, em22])
    avar_env_mat = np.diag([em11, em22 / ratio22])
    return avar_em_mat, avar_env_mat, float(ratio22)


def sandwich_avar(phi_hat, data):
    """Model-robust asymptotic covariance of the envelope estimator in the
    natural coordinates: A Vtilde A^T with Vtilde the sandwich covariance of
    the unconstrained estimator (per-subject scaling) and
    A = G (G^T Jn G)^+ G^T Jn the population projection onto the envelope
    tangent space."""
    theta = natural_of_envelope(phi_hat)
    info = fisher_info(theta, data)
    jn = info.assembled() / data.n
    psi = score_contributions(theta, data)
    s_hat = psi.T @ psi / data.n
    jinv = _pd_inverse(jn, "Fisher information")
    vtilde = jinv @ s_hat @ jinv
    g = gradient_G(phi_hat).matrix
    inner = g.T @ jn @ g
    a_mat = g @ pinv(0.5 * (inner + inner.T)) @ g.T @ jn
    out = a_mat @ vtilde @ a_mat.T
    return 0.5 * (out + out.T)


@dataclass
class BootstrapResult:
    se: np.ndarray  # (k,) standard errors of the bootstrapped statistic
    draws: np.ndarray  # (B_ok, k) successful replicate statistics
    n_failed: int
    n_requested: int


def _default_stat(fit):
    return fit.theta_hat.beta.reshape(-1, order="F")


def bootstrap_se(data, fitter, B, seed, index_sampler=None, stat=None):
    """Nonparametric bootstrap over subjects.

    `fitter(data, init=None)` must return a fit with a `theta_hat`; each
    replicate resamples n subjects with replacement (deterministically from
    `seed` and the replicate index) and warm-starts the fitter at the
    full-data estimate.  `stat` maps a fit to the statistic vector
    (default: vec of the coefficient matrix).  Replicates that raise
    numerical errors are dropped; more than 20% failures aborts with
    UnstableBootstrapError.
    """
    if stat is None:
        stat = _default_stat
    base = fitter(data, init=None)
    theta0 = base.theta_hat
    draws = []
    n_failed = 0
    for b in range(int(B)):
        if index_sampler is None:
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([int(seed), b])))
            idx = rng.integers(0, data.n, data.n)
        else:
            idx = np.asarray(index_sampler(b, data.n))
        bdata = data.subset(idx)
        try:
            fit = fitter(bdata, init=theta0)
        except (SingularCovarianceError, RankDeficientDesignError,
                InformationSingularityError, np.linalg.LinAlgError) as exc:
            n_failed += 1
            warnings.warn("bootstrap replicate %d failed: %s" % (b, exc))
            continue
        draws.append(np.asarray(stat(fit), dtype=float))
    if n_failed > 0.2 * B:
        raise UnstableBootstrapError(
            "%d of %d bootstrap replicates failed" % (n_failed, B))
    draws = np.asarray(draws)
    return BootstrapResult(se=draws.std(axis=0, ddof=1), draws=draws,
                           n_failed=n_failed, n_requested=int(B))

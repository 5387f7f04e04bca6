"""Comparison estimators that ignore the longitudinal random effects:
ordinary least squares, the classic response envelope, and a response
reduction by partial least squares, all on an (N, d) response matrix.

Longitudinal data enters either through `vectorize_balanced` (one row per
subject, the stacked response; requires balance and time-constant
covariates) or through `pool_observations` (one row per observation).
"""

import warnings
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, SingularCovarianceError
from .em import solve_design
from .envelope import OneDProblem, EnvelopeFitOptions, oneD_basis
from .matkit import projector

OlsFit = namedtuple("OlsFit", ["alpha", "beta", "sigma"])


@dataclass
class VectorizedRegressionData:
    """Plain multivariate regression data: responses Y (N, d), covariates
    X (N, p).  r and J record where d = r * J came from."""

    Y: np.ndarray
    X: np.ndarray
    r: int
    J: int

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.Y.shape[0] != self.X.shape[0]:
            raise DataFormatError("Y and X row counts differ")

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]


@dataclass
class ResponseEnvelopeFit:
    alpha: np.ndarray
    beta: np.ndarray  # (d, p)
    sigma: np.ndarray  # (d, d)
    gamma: np.ndarray  # (d, u)
    u: int
    loglik: float
    bic: float
    bic_table: np.ndarray = None


@dataclass
class ResponsePlsFit:
    alpha: np.ndarray
    beta: np.ndarray  # (d, p)
    directions: np.ndarray  # (d, u) response weight vectors
    u: int


def vectorize_balanced(data):
    """Stack each subject's response matrix into one long row (time blocks of
    r coordinates).  Requires a balanced design and covariates that do not
    vary over time within a subject; raises DataFormatError otherwise.
    """
    if not data.is_balanced():
        raise DataFormatError("vectorize_balanced requires a balanced design")
    j = int(data.J[0])
    rows = np.empty((data.n, data.r * j))
    xmat = np.empty((data.n, data.p))
    for i in range(data.n):
        s, e = data.subj_ptr[i], data.subj_ptr[i + 1]
        xi = data.Xt[s:e]
        if not np.all(xi == xi[0]):
            raise DataFormatError(
                "vectorize_balanced requires time-constant covariates "
                "(subject %d varies)" % i)
        rows[i] = data.Yt[s:e].reshape(-1)
        xmat[i] = xi[0]
    return VectorizedRegressionData(Y=rows, X=xmat, r=data.r, J=j)


def pool_observations(data):
    """Treat every (subject, time) observation as an independent sample of
    the r-dimensional response.  Always applicable; the within-subject
    dependence is simply ignored."""
    return VectorizedRegressionData(Y=data.Yt.copy(), X=data.Xt.copy(),
                                    r=data.r, J=1)


def _centered(vdata):
    ybar = vdata.Y.mean(axis=0)
    xbar = vdata.X.mean(axis=0)
    return vdata.Y - ybar, vdata.X - xbar, ybar, xbar


def fit_ols(vdata):
    """Multivariate least squares; sigma is the maximum-likelihood residual
    covariance (divisor N)."""
    yc, xc, ybar, xbar = _centered(vdata)
    sxx = xc.T @ xc
    low = solve_design(sxx)
    beta = np.linalg.solve(low.T, np.linalg.solve(low, xc.T @ yc)).T
    resid = yc - xc @ beta.T
    sigma = resid.T @ resid / vdata.N
    return OlsFit(alpha=ybar - beta @ xbar, beta=beta,
                  sigma=0.5 * (sigma + sigma.T))


def _gaussian_loglik(Y, mean, sigma):
    n, d = Y.shape
    try:
        low = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("fitted covariance is not positive definite")
    w = np.linalg.solve(low, (Y - mean).T)
    return (-0.5 * n * d * np.log(2.0 * np.pi)
            - n * np.log(np.diag(low)).sum()
            - 0.5 * float((w * w).sum()))


def _envelope_at_u(vdata, u, ols, s_res, s_y, options):
    d, p = vdata.d, vdata.X.shape[1]
    if u == 0:
        gamma = np.zeros((d, 0))
        beta = np.zeros((d, p))
        sigma = s_y.copy()
    elif u == d:
        gamma = np.eye(d)
        beta = ols.beta.copy()
        sigma = s_res.copy()
    else:
        gamma = oneD_basis(OneDProblem(M=s_res, U=ols.beta @ ols.beta.T, u=u),
                           options)
        pmat = gamma @ gamma.T
        qmat = np.eye(d) - pmat
        beta = pmat @ ols.beta
        sigma = pmat @ s_res @ pmat + qmat @ s_y @ qmat
        sigma = 0.5 * (sigma + sigma.T)
    ybar = vdata.Y.mean(axis=0)
    xbar = vdata.X.mean(axis=0)
    alpha = ybar - beta @ xbar
    mean = alpha + vdata.X @ beta.T
    ll = _gaussian_loglik(vdata.Y, mean, sigma)
    bic = -2.0 * ll + np.log(vdata.N) * p * u
    return ResponseEnvelopeFit(alpha=alpha, beta=beta, sigma=sigma, gamma=gamma,
                               u=u, loglik=ll, bic=bic)


def fit_response_envelope(vdata, u=None, options=None):
    """Classic response envelope estimator on vectorized data.

    The basis comes from the same greedy 1D search used by the mixed fit,
    with M the OLS residual covariance and U = beta_ols beta_ols^T; the
    coefficient is the projected OLS coefficient.  With u None the dimension
    is chosen by BIC over u = 0..d (penalty log(N) * p * u) and the swept
    table is attached to the result.
    """
    if options is None:
        options = EnvelopeFitOptions()
    ols = fit_ols(vdata)
    yc, xc, _, _ = _centered(vdata)
    s_res = ols.sigma
    s_x = xc.T @ xc / vdata.N
    s_y = s_res + ols.beta @ s_x @ ols.beta.T
    s_y = 0.5 * (s_y + s_y.T)
    if u is not None:
        if not 0 <= u <= vdata.d:
            raise ValueError("u must be in [0, %d], got %d" % (vdata.d, u))
        return _envelope_at_u(vdata, int(u), ols, s_res, s_y, options)
    bic_table = np.full(vdata.d + 1, np.nan)
    fits = {}
    for cand in range(vdata.d + 1):
        try:
            fit = _envelope_at_u(vdata, cand, ols, s_res, s_y, options)
        except SingularCovarianceError as exc:
            warnings.warn("response envelope failed at u=%d: %s" % (cand, exc))
            continue
        fits[cand] = fit
        bic_table[cand] = fit.bic
    if not fits:
        raise SingularCovarianceError("response envelope failed at every dimension")
    best = int(np.nanargmin(bic_table))
    out = fits[best]
    out.bic_table = bic_table
    return out


def fit_response_pls(vdata, u):
    """Response-reduction partial least squares (SIMPLS run on the response
    side): weight vectors are dominant left singular vectors of the
    successively deflated cross-covariance, deflation removes the span of the
    corresponding orthonormalized response loadings, and the coefficient is
    the OLS coefficient projected onto the weight span.  u >= d returns the
    OLS fit; components beyond the rank of the cross-covariance are dropped
    with a warning.
    """
    u = int(u)
    if u < 0:
        raise ValueError("u must be nonnegative")
    ols = fit_ols(vdata)
    d = vdata.d
    if u >= d:
        if u > d:
            warnings.warn("PLS components capped at the response dimension %d" % d)
        return ResponsePlsFit(alpha=ols.alpha, beta=ols.beta.copy(),
                              directions=np.eye(d), u=d)
    yc, xc, ybar, xbar = _centered(vdata)
    n = vdata.N
    cmat = yc.T @ xc / n
    s_y = yc.T @ yc / n
    wcols = []
    qcols = []
    for _ in range(u):
        uvec, svals, _ = np.linalg.svd(cmat, full_matrices=False)
        if svals[0] <= 1e-12 * max(1.0, np.abs(s_y).max()):
            warnings.warn("cross-covariance exhausted after %d PLS components "
                          "(requested %d)" % (len(wcols), u))
            break
        w = uvec[:, 0]
        q = s_y @ w
        for prev in qcols:
            q = q - prev * (prev @ q)
        qn = np.linalg.norm(q)
        if qn <= 1e-12:
            warnings.warn("response loadings exhausted after %d PLS components "
                          "(requested %d)" % (len(wcols), u))
            break
        q = q / qn
        wcols.append(w)
        qcols.append(q)
        cmat = cmat - np.outer(q, q @ cmat)
    if wcols:
        wmat = np.column_stack(wcols)
    else:
        wmat = np.zeros((d, 0))
    beta = projector(wmat) @ ols.beta
    alpha = ybar - beta @ xbar
    return ResponsePlsFit(alpha=alpha, beta=beta, directions=wmat, u=wmat.shape[1])

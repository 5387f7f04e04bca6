"""Standard mixed-effects EM estimator (no envelope constraint).

E-step: exact Gaussian posterior moments of vec(b_i) given Y_i.
M-step: closed-form updates with alpha substituted out through centering,
so beta and alpha are maximized jointly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import SingularCovarianceError, RankDeficientDesignError
from .matkit import vech, unvech, vech_dim
from .model import NaturalParams, obs_loglik


@dataclass
class PosteriorMoments:
    """E-step output: per-subject posterior moments plus M-step accumulators.

    mu[i] and sigma_post[i] are the posterior mean/covariance of vec(b_i).
    psi_b sums A_ij sigma_post[i] A_ij^T over all observations; sb_mean is
    (1/n) sum_i (sigma_post[i] + mu_i mu_i^T) (the sigma_b update); m_obs
    holds the per-observation posterior-mean random-effect contribution
    A_ij mu_i as rows.
    """

    mu: np.ndarray          # (n, qr)
    sigma_post: np.ndarray  # (n, qr, qr)
    psi_b: np.ndarray       # (r, r)
    sb_mean: np.ndarray     # (qr, qr)
    m_obs: np.ndarray       # (J_total, r)


@dataclass
class EmOptions:
    """EM controls.

    delta_tol is the threshold on the relative L1 change of beta between
    successive EM-map evaluations (with an absolute fallback when beta is
    numerically zero).  max_iter caps the number of EM-map evaluations.
    loglik_check=True records the observed-data log-likelihood of every
    accepted iterate in loglik_trace; with False only the final value is
    computed, which is cheaper.
    Initialization is deterministic: alpha=0, beta=0, identity covariances.

    accel selects the fixed-point driver.  "none" is the plain update loop.
    "squarem" wraps the same EM map in squared-extrapolation steps: after
    two plain updates it tries one extrapolated update and keeps it only
    when the observed log-likelihood does not decrease (a failed or
    non-finite extrapolation simply falls back to the plain update).
    "anderson" (default) instead keeps a window of the last accel_window
    map evaluations and, after each plain update, proposes the multi-secant
    (Anderson) extrapolation of that history, run through the map once and
    accepted under the same likelihood guard.  Under either driver the
    accepted iterates are always outputs of the EM map, the likelihood
    ascent property is preserved, and the fixed points are unchanged -- the
    acceleration only shortens the crawl along flat directions, which for
    this model is dominated by the covariance attribution between the
    random effects and the noise (a nearly unit-rate linear crawl, where
    the multi-secant proposal is far stronger than the single-secant one).
    Convergence is still declared on the plain-step delta.

    ll_plateau_tol adds an optional secondary stop (disabled at its default
    0.0): stop once the observed log-likelihood has improved by less than
    ll_plateau_tol over the last ll_plateau_window EM-map evaluations.  The
    beta-change criterion tracks movement along the likelihood ridge, which
    for this model stays orders of magnitude above delta_tol long after the
    likelihood itself -- the quantity dimension selection compares -- has
    stopped changing; the plateau rule stops there.  A plateau stop still
    reports converged=False, since the primary criterion was not met.

    accel_warmup runs that many plain evaluations before the first
    extrapolation is attempted.  The envelope fit re-searches its basis on
    every plain step, and early extrapolations can outrun that search:
    a long jump inside a not-yet-settled span entrenches it (the error
    covariance absorbs the signal the span misses, hiding it from later
    searches).  A short plain phase lets the span and coefficient co-adapt
    first.
    """

    max_iter: int = 2000
    delta_tol: float = 1e-8
    loglik_check: bool = True
    accel: str = "anderson"
    accel_window: int = 6
    ll_plateau_tol: float = 0.0
    ll_plateau_window: int = 100
    accel_warmup: int = 0


@dataclass
class FitResult:
    theta_hat: NaturalParams
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    delta_final: float
    phi_hat: object = None   # EnvelopeParams for envelope fits
    u: object = None
    bic: object = None


def _chol_inv(mat, what):
    """Inverse of a symmetric PD matrix via Cholesky; raises on failure."""
    mat = np.asarray(mat, dtype=float)
    try:
        low = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("%s is not positive definite" % what)
    inv = np.linalg.solve(low.T, np.linalg.solve(low, np.eye(mat.shape[0])))
    return 0.5 * (inv + inv.T)


def e_step(theta, data):
    """Posterior moments of the random effects at the current parameters.

    sigma_post_i = (sigma_b^{-1} + (Z_i Z_i^T) kron sigma_eps^{-1})^{-1},
    mu_i = sigma_post_i vec(sigma_eps^{-1} R_i Z_i^T) with R_i the residual
    Y_i - alpha 1^T - beta X_i.
    """
    w = _chol_inv(theta.sigma_eps, "sigma_eps")
    sb_inv = _chol_inv(theta.sigma_b, "sigma_b")
    mu, sigma_post, psi_b, sb_mean, m_obs, status = kernels.e_step_suffstats(
        data.Yt, data.Xt, data.Zt, data.subj_ptr,
        np.ascontiguousarray(theta.alpha, dtype=float),
        np.ascontiguousarray(theta.beta, dtype=float),
        np.ascontiguousarray(w), np.ascontiguousarray(sb_inv),
    )
    if status != 0:
        raise SingularCovarianceError("posterior precision is not positive definite")
    return PosteriorMoments(mu=mu, sigma_post=sigma_post, psi_b=psi_b,
                            sb_mean=sb_mean, m_obs=m_obs)


def centered_moments(post, data):
    """Centered data/posterior summaries shared by the M-step variants.

    Returns (ybar, xbar, mbar, Uc, Xc) where Uc = (Y - m)_centered stacks
    response-minus-posterior-mean columns and Xc the centered predictors,
    both with one column per observation.
    """
    jt = float(data.J_total)
    ybar = data.Yt.mean(axis=0)
    xbar = data.Xt.mean(axis=0)
    mbar = post.m_obs.mean(axis=0)
    Uc = (data.Yt - post.m_obs - (ybar - mbar)[None, :]).T
    Xc = (data.Xt - xbar[None, :]).T
    return ybar, xbar, mbar, Uc, Xc


def solve_design(sxx):
    """Factor X_c X_c^T, raising RankDeficientDesignError when singular."""
    try:
        low = np.linalg.cholesky(sxx)
    except np.linalg.LinAlgError:
        raise RankDeficientDesignError("centered predictor cross-product is singular")
    return low


def m_step(theta_t, post, data):
    """Unconstrained M-step update.

    beta = U_c X_c^T (X_c X_c^T)^{-1} (no projection),
    sigma_eps = (U_c Q_{X_c^T} U_c^T + psi_b)/J_total, evaluated as
    U_c U_c^T - beta (X_c X_c^T) beta^T + psi_b to avoid the J x J projector,
    alpha = ybar - beta_new xbar - mbar, sigma_b = sb_mean.
    """
    ybar, xbar, mbar, Uc, Xc = centered_moments(post, data)
    sxx = Xc @ Xc.T
    low = solve_design(sxx)
    sxu = Xc @ Uc.T                          # (p, r)
    beta = np.linalg.solve(low.T, np.linalg.solve(low, sxu)).T
    uu = Uc @ Uc.T
    sigma_eps = (uu - beta @ sxx @ beta.T + post.psi_b) / float(data.J_total)
    sigma_eps = 0.5 * (sigma_eps + sigma_eps.T)
    alpha = ybar - beta @ xbar - mbar
    return NaturalParams(alpha=alpha, beta=beta, sigma_eps=sigma_eps,
                         sigma_b=post.sb_mean.copy())


def _beta_delta(beta_new, beta_old):
    """Relative L1 change of beta, with absolute fallback near zero."""
    num = np.abs(beta_new - beta_old).sum()
    den = np.abs(beta_new).sum()
    if den < 1e-12:
        return num
    return num / den


def initial_params(data):
    """Deterministic initialization: zero coefficients, identity covariances."""
    return NaturalParams(alpha=np.zeros(data.r), beta=np.zeros((data.r, data.p)),
                         sigma_eps=np.eye(data.r), sigma_b=np.eye(data.q * data.r))


def _pack_params(theta):
    """Flatten (alpha, beta, sigma_eps, sigma_b) into one real vector.

    Covariances enter through vech, so the unpacked matrices are symmetric
    by construction for any vector (positive definiteness is not enforced;
    an indefinite extrapolation fails in the next E-step and is handled by
    the caller's fallback)."""
    return np.concatenate([theta.alpha, theta.beta.ravel(),
                           vech(theta.sigma_eps), vech(theta.sigma_b)])


def _unpack_params(v, data):
    r, p = data.r, data.p
    qr = data.q * data.r
    k = 0
    alpha = v[k:k + r].copy(); k += r
    beta = v[k:k + r * p].reshape(r, p).copy(); k += r * p
    de = vech_dim(r)
    sigma_eps = unvech(v[k:k + de]); k += de
    sigma_b = unvech(v[k:k + vech_dim(qr)])
    return NaturalParams(alpha=alpha, beta=beta, sigma_eps=sigma_eps,
                         sigma_b=sigma_b)


def drive_fixed_point(theta, step_fn, delta_fn, ll_fn, pack_fn, unpack_fn,
                      opts, trace, spec_step_fn=None):
    """Run the EM map theta <- step_fn(theta) to convergence or budget.

    The iterate may be any state object understood by the supplied
    closures: step_fn advances it, delta_fn(new, old) is the convergence
    metric (checked after every plain map evaluation), ll_fn evaluates the
    observed log-likelihood, pack_fn flattens the state's free parameters
    to a vector, and unpack_fn(vec, like) rebuilds a state of the same
    kind as `like` around that vector.  Appends the log-likelihood of
    every accepted iterate to `trace` when opts.loglik_check.

    With opts.accel == "none" this is the textbook loop.  With "squarem"
    each cycle runs two plain updates and then one update from the squared
    extrapolation of the last three iterates (step length clipped at -1,
    where the proposal degenerates to the second plain update), accepted
    only when its likelihood is at least that of the second plain update.
    With "anderson" each cycle runs one plain update, then proposes the
    multi-secant extrapolation built from the last accel_window map
    evaluations, runs the proposal through the map once, and accepts that
    stabilized point only when its likelihood is at least the plain
    update's.  Under either scheme any numerical failure on an
    extrapolated point falls back to the plain update.  spec_step_fn, when
    given, replaces step_fn on extrapolated points only (the envelope fit
    uses this to skip the span re-search on speculative moves).
    Convergence is always declared on a plain-step delta, so the reported
    delta_final has the same meaning under all drivers; the optional
    likelihood-plateau stop (see EmOptions) is checked on every accepted
    iterate whose likelihood is evaluated.

    Returns (theta, evals, converged, delta) with evals the number of
    EM-map evaluations performed.
    """
    if opts.accel not in ("none", "squarem", "anderson"):
        raise ValueError("unknown accel %r" % (opts.accel,))
    if spec_step_fn is None:
        spec_step_fn = step_fn
    evals = 0
    delta = np.inf
    converged = False
    log = opts.loglik_check
    plateau = float(opts.ll_plateau_tol)
    track_ll = log or plateau > 0.0
    mark = [-np.inf, 0]  # likelihood watermark and the eval count at it

    def plateaued(llv):
        if plateau <= 0.0:
            return False
        if llv >= mark[0] + plateau:
            mark[0] = llv
            mark[1] = evals
            return False
        return evals - mark[1] >= opts.ll_plateau_window

    hist_x = []  # packed inputs of recent map evaluations (anderson)
    hist_g = []  # packed outputs of the same evaluations

    def remember(x, g):
        hist_x.append(x)
        hist_g.append(g)
        if len(hist_x) > opts.accel_window + 1:
            hist_x.pop(0)
            hist_g.pop(0)

    while evals < opts.max_iter:
        theta0 = theta
        theta1 = step_fn(theta0)
        evals += 1
        delta = delta_fn(theta1, theta0)
        theta = theta1
        ll1 = ll_fn(theta1) if track_ll else None
        if log:
            trace.append(ll1)
        if delta < opts.delta_tol:
            converged = True
            break
        if ll1 is not None and plateaued(ll1):
            break
        if (opts.accel == "none" or evals < opts.accel_warmup
                or evals >= opts.max_iter):
            continue
        if opts.accel == "anderson":
            remember(pack_fn(theta0), pack_fn(theta1))
            if len(hist_x) < 2:
                continue
            gmat = np.stack(hist_g, axis=1)
            fmat = gmat - np.stack(hist_x, axis=1)
            gam, _, _, _ = np.linalg.lstsq(np.diff(fmat, axis=1),
                                           fmat[:, -1], rcond=None)
            vex = gmat[:, -1] - np.diff(gmat, axis=1) @ gam
            if not np.isfinite(vex).all():
                continue
            try:
                theta3 = spec_step_fn(unpack_fn(vex, theta1))
                evals += 1
                ll3 = ll_fn(theta3)
                base = ll1 if ll1 is not None else ll_fn(theta1)
                ok = np.isfinite(ll3) and ll3 >= base
            except (SingularCovarianceError, RankDeficientDesignError,
                    np.linalg.LinAlgError):
                ok = False
            if ok:
                remember(vex, pack_fn(theta3))
                theta = theta3
                if log:
                    trace.append(ll3)
                if plateaued(ll3):
                    break
            continue
        theta2 = step_fn(theta1)
        evals += 1
        delta = delta_fn(theta2, theta1)
        theta = theta2
        ll2 = ll_fn(theta2) if track_ll else None
        if log:
            trace.append(ll2)
        if delta < opts.delta_tol:
            converged = True
            break
        if ll2 is not None and plateaued(ll2):
            break
        if evals >= opts.max_iter:
            break
        v0 = pack_fn(theta0)
        rr = pack_fn(theta1) - v0
        vv = pack_fn(theta2) - v0 - 2.0 * rr
        vnorm2 = float(vv @ vv)
        if not np.isfinite(vnorm2) or vnorm2 <= 0.0:
            continue
        a = -np.sqrt(float(rr @ rr) / vnorm2)
        if a > -1.0:
            a = -1.0
        vex = v0 - 2.0 * a * rr + (a * a) * vv
        try:
            theta3 = spec_step_fn(unpack_fn(vex, theta2))
            evals += 1
            ll3 = ll_fn(theta3)
            if ll2 is None:
                ll2 = ll_fn(theta2)
            ok = np.isfinite(ll3) and ll3 >= ll2
        except (SingularCovarianceError, RankDeficientDesignError,
                np.linalg.LinAlgError):
            ok = False
        if ok:
            theta = theta3
            if log:
                trace.append(ll3)
            if plateaued(ll3):
                break
    return theta, evals, converged, delta


def fit_standard_em(data, opts=None, init=None):
    """Fit the mixed model by EM from the deterministic initialization.

    Alternates e_step/m_step (through the driver selected by opts.accel)
    until the relative beta change drops below opts.delta_tol or max_iter
    EM-map evaluations are reached.  Non-convergence is flagged in the
    result, not raised.  init overrides the starting parameters (used by
    the bootstrap for warm starts).
    """
    if opts is None:
        opts = EmOptions()
    theta = init if init is not None else initial_params(data)

    def step_fn(th):
        return m_step(th, e_step(th, data), data)

    trace = []
    theta, evals, converged, delta = drive_fixed_point(
        theta, step_fn,
        lambda a, b: _beta_delta(a.beta, b.beta),
        lambda th: obs_loglik(th, data),
        _pack_params, lambda v, like: _unpack_params(v, data),
        opts, trace)
    if not trace:
        trace = [obs_loglik(theta, data)]
    return FitResult(theta_hat=theta, loglik_trace=np.asarray(trace),
                     iterations=evals, converged=converged,
                     delta_final=float(delta))

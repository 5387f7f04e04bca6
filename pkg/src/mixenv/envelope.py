"""Envelope-constrained estimation: greedy basis estimation (the 1D
algorithm), the envelope M-step, the full EM fit, and BIC selection of the
envelope dimension u.
"""

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import SingularCovarianceError, RankDeficientDesignError, MixenvError
from .model import NaturalParams, EnvelopeParams, obs_loglik, orth_complement
from .em import (
    EmOptions,
    FitResult,
    e_step,
    m_step,
    centered_moments,
    solve_design,
    initial_params,
    drive_fixed_point,
    _beta_delta,
    _pack_params,
    _unpack_params,
)

_STARTS_SEED = 12345  # fixed seed for the pregenerated random sphere starts


@dataclass
class OneDProblem:
    """Inputs of the greedy basis search: minimize, column by column,
    D_k(w) = log(w^T M_k w) + log(w^T (M_k + U_k)^{-1} w) over unit vectors,
    where M_k, U_k are M, U compressed to the current orthogonal complement.
    """

    M: np.ndarray  # (r, r) PD
    U: np.ndarray  # (r, r) PSD
    u: int

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))


@dataclass
class EnvelopeFitOptions:
    """Envelope fit controls: EM options plus 1D-search and BIC settings.

    bic_penalty 'log_jtotal' uses log(J_total) * p * u (the longitudinal
    effective sample size); 'log_n' uses log(n) * p * u.

    span_refresh_every applies to the plain driver (em.accel == "none") and
    controls how often the greedy 1D search is re-run: 1 (default)
    re-estimates the basis every EM iteration; k > 1 re-runs it on every
    k-th iteration and otherwise keeps the previous span while still
    maximizing the remaining parameters exactly for that span.  Both
    variants ascend the observed likelihood (the fixed-span step is the
    exact conditional maximizer, so this is a generalized EM); convergence
    is only declared on an iteration that refreshed the span.  The
    accelerated driver ignores the period: it refreshes the span between
    fixed-span inner solves, i.e. adaptively.

    span_guard controls whether a freshly searched span may replace the
    previous one when it is worse: "objective" (default) keeps the previous
    span whenever the proposal increases the profile objective F, which
    makes every accepted step a likelihood ascent; "none" always takes the
    search result, exactly as the update rule is stated, which lets the
    span jump between basins at the price of occasional likelihood dips.
    """

    em: EmOptions = field(default_factory=EmOptions)
    restarts: int = 8
    oned_tol: float = 1e-12
    oned_max_inner: int = 300
    bic_penalty: str = "log_jtotal"
    span_refresh_every: int = 1
    span_guard: str = "objective"


def _sphere_starts(restarts, r):
    rng = np.random.Generator(np.random.PCG64(_STARTS_SEED))
    return rng.standard_normal((max(1, restarts), r))


def oneD_basis(prob, options=None):
    """Greedy semi-orthogonal basis (r x u) for the envelope of span(U) w.r.t. M.

    Each column minimizes the stepwise objective over the unit sphere of the
    shrinking orthogonal complement, from spectral anchor starts plus
    deterministic pregenerated random starts; the best local optimum wins.
    With U = 0 the objective is minimized (at value 0) by any eigenvector
    of M and the anchor order breaks the tie deterministically.
    """
    if options is None:
        options = EnvelopeFitOptions()
    r = prob.M.shape[0]
    u = int(prob.u)
    if u == 0:
        return np.zeros((r, 0))
    if u == r:
        return np.eye(r)
    starts = _sphere_starts(options.restarts, r)
    gamma, status = kernels.oned_greedy(
        np.ascontiguousarray(prob.M), np.ascontiguousarray(prob.U),
        u, starts, options.oned_max_inner, options.oned_tol,
    )
    if status != 0:
        raise SingularCovarianceError("1D objective matrix is not positive definite")
    return gamma


def _material_total_parts(Uc, Xc, psi):
    """(Gmat, T): the material-part matrix U_c Q_{X_c^T} U_c^T + psi and the
    total matrix U_c U_c^T + psi, both symmetric."""
    uu = Uc @ Uc.T
    sxx = Xc @ Xc.T
    sxu = Xc @ Uc.T
    # U_c P_{X_c^T} U_c^T via the normal equations; pseudo-inverse keeps this
    # evaluator total (rank-deficient designs are the fitter's concern)
    coef = np.linalg.pinv(sxx) @ sxu
    gmat = uu - sxu.T @ coef + psi
    return 0.5 * (gmat + gmat.T), 0.5 * (uu + uu.T) + psi


def _objective_from_parts(gamma, gmat, tmat):
    r = gmat.shape[0]
    u = gamma.shape[1]
    if u == 0:
        arg = tmat
    elif u == r:
        arg = gmat
    else:
        p = gamma @ gamma.T
        q = np.eye(r) - p
        arg = p @ gmat @ p + q @ tmat @ q
    sign, val = np.linalg.slogdet(0.5 * (arg + arg.T))
    return float(val) if sign > 0 else np.inf


def envelope_objective_F(gamma, Uc, Xc, Psi):
    """Profile objective F(span gamma) minimized by the envelope M-step:

    log det{ P_gamma (U_c Q_{X_c^T} U_c^T + Psi) P_gamma
             + Q_gamma (U_c U_c^T + Psi) Q_gamma }.

    The combined argument is full rank (the two blocks live on complementary
    subspaces), so the ordinary log-determinant applies; it equals the sum
    of the restricted log-determinants of the two blocks.  Invariant under
    right-orthogonal rotation of gamma.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 1:
        gamma = gamma[:, None]
    gmat, tmat = _material_total_parts(np.asarray(Uc, float), np.asarray(Xc, float),
                                       np.asarray(Psi, float))
    return _objective_from_parts(gamma, gmat, tmat)


def envelope_m_step(theta_t, post, data, u, options=None, prev_gamma=None,
                    refresh_span=True):
    """Envelope-constrained M-step.

    The basis gamma is estimated by the greedy 1D search with M and U taken
    from the current parameter iterate; if prev_gamma is supplied, the new
    span is kept only when it does not increase the profile objective F
    (a monotonicity safeguard -- the greedy search is a local optimizer,
    and the previous span always attains the previous Q value).  With
    refresh_span False the search is skipped and the previous span reused;
    the remaining updates are the exact conditional maximizers for that
    span, so the step is still a valid generalized-EM move.  Then
    beta = P_gamma U_c X_c^T (X_c X_c^T)^{-1} and
    sigma_eps = P (U_c Q_{X_c^T} U_c^T + psi) P / J + Q (U_c U_c^T + psi) Q / J.

    Returns (EnvelopeParams, NaturalParams).
    """
    if options is None:
        options = EnvelopeFitOptions()
    r, p = data.r, data.p
    jt = float(data.J_total)
    ybar, xbar, mbar, Uc, Xc = centered_moments(post, data)

    if u == 0:
        alpha = ybar - mbar
        sigma_eps = (Uc @ Uc.T + post.psi_b) / jt
        sigma_eps = 0.5 * (sigma_eps + sigma_eps.T)
        theta = NaturalParams(alpha=alpha, beta=np.zeros((r, p)),
                              sigma_eps=sigma_eps, sigma_b=post.sb_mean.copy())
        phi = EnvelopeParams(alpha=alpha, gamma=np.zeros((r, 0)), eta=np.zeros((0, p)),
                             omega=np.zeros((0, 0)), omega0=sigma_eps.copy(),
                             sigma_b=post.sb_mean.copy(), u=0)
        return phi, theta

    sxx = Xc @ Xc.T
    low = solve_design(sxx)
    sxu = Xc @ Uc.T
    beta_u = np.linalg.solve(low.T, np.linalg.solve(low, sxu)).T  # unconstrained
    uu = Uc @ Uc.T
    gmat = uu - beta_u @ sxx @ beta_u.T + post.psi_b
    gmat = 0.5 * (gmat + gmat.T)
    tmat = 0.5 * (uu + uu.T) + post.psi_b

    if u == r:
        gamma = np.eye(r)
    elif not refresh_span and prev_gamma is not None and prev_gamma.shape[1] == u:
        gamma = prev_gamma
    else:
        # 1D search driven by the current iterate: M is the error covariance
        # sigma_eps_t and U = beta_t beta_t^T the regression signal.  Built
        # from the iterate, U stays concentrated near rank one when a
        # one-dimensional span suffices, so higher-dimensional fits gain
        # little from their extra directions -- that is what keeps the
        # likelihood gap between dimensions small enough for BIC to
        # resolve.  At the zero initializer beta_t = 0 makes the objective
        # flat (and any later iterate spans only the current basis, which
        # would freeze a span chosen by a flat search), so the degenerate
        # first step falls back to the freshly computed unconstrained
        # update.  The F comparison keeps the previous span whenever the
        # proposal is worse, which is what guarantees EM monotonicity.
        signal = theta_t.beta
        if float(np.abs(signal).sum()) <= 1e-12:
            signal = beta_u
        gamma = oneD_basis(OneDProblem(M=theta_t.sigma_eps,
                                       U=signal @ signal.T, u=u),
                           options)
        if (options.span_guard == "objective" and prev_gamma is not None
                and prev_gamma.shape[1] == u):
            if _objective_from_parts(gamma, gmat, tmat) > \
               _objective_from_parts(prev_gamma, gmat, tmat):
                gamma = prev_gamma

    pmat = gamma @ gamma.T
    qmat = np.eye(r) - pmat
    beta = pmat @ beta_u
    sigma_eps = (pmat @ gmat @ pmat + qmat @ tmat @ qmat) / jt
    sigma_eps = 0.5 * (sigma_eps + sigma_eps.T)
    alpha = ybar - beta @ xbar - mbar
    gamma0 = orth_complement(gamma, r)
    eta = gamma.T @ beta
    omega = gamma.T @ sigma_eps @ gamma
    omega0 = gamma0.T @ sigma_eps @ gamma0
    phi = EnvelopeParams(alpha=alpha, gamma=gamma, eta=eta,
                         omega=0.5 * (omega + omega.T),
                         omega0=0.5 * (omega0 + omega0.T),
                         sigma_b=post.sb_mean.copy(), u=u)
    theta = NaturalParams(alpha=alpha, beta=beta, sigma_eps=sigma_eps,
                          sigma_b=post.sb_mean.copy())
    return phi, theta


def _null_model_delta(theta_new, theta_old):
    """Convergence metric for the u = 0 fit, where beta is identically zero:
    the largest relative L1 change across alpha, sigma_eps and sigma_b."""
    out = 0.0
    for new, old in ((theta_new.alpha, theta_old.alpha),
                     (theta_new.sigma_eps, theta_old.sigma_eps),
                     (theta_new.sigma_b, theta_old.sigma_b)):
        num = np.abs(new - old).sum()
        den = max(np.abs(new).sum(), 1e-12)
        out = max(out, num / den)
    return out


def _bic_penalty_factor(options, data):
    if options.bic_penalty == "log_jtotal":
        return float(np.log(data.J_total))
    if options.bic_penalty == "log_n":
        return float(np.log(data.n))
    raise ValueError("unknown bic_penalty %r" % (options.bic_penalty,))


def _final_phi(theta, gamma, data, u):
    """Envelope coordinates of the fitted natural parameters for a known span.

    Exact because the fitted beta lies in span(gamma) and sigma_eps is block
    diagonal between span(gamma) and its complement by construction of the
    envelope M-step.
    """
    gamma0 = orth_complement(gamma, data.r)
    eta = gamma.T @ theta.beta
    omega = gamma.T @ theta.sigma_eps @ gamma
    omega0 = gamma0.T @ theta.sigma_eps @ gamma0
    return EnvelopeParams(alpha=theta.alpha.copy(), gamma=gamma, eta=eta,
                          omega=0.5 * (omega + omega.T),
                          omega0=0.5 * (omega0 + omega0.T),
                          sigma_b=theta.sigma_b.copy(), u=u)


def _envelope_delta_fn(u):
    if u == 0:
        return _null_model_delta
    return lambda a, b: _beta_delta(a.beta, b.beta)


def _fit_envelope_plain(data, u, opts, theta, trace):
    """The literal alternating loop: every iteration is one envelope M-step,
    with the span re-searched every span_refresh_every iterations and reused
    in between.  Convergence is only declared on an iteration that refreshed
    the span.  Returns (theta, gamma, evals, converged, delta)."""
    prev_gamma = None
    delta = np.inf
    converged = False
    iterations = 0
    delta_fn = _envelope_delta_fn(u)
    period = max(1, int(opts.span_refresh_every))
    force_refresh = False
    for it in range(opts.em.max_iter):
        refresh = force_refresh or prev_gamma is None or it % period == 0
        post = e_step(theta, data)
        phi, theta_new = envelope_m_step(theta, post, data, u, opts, prev_gamma,
                                         refresh_span=refresh)
        delta = delta_fn(theta_new, theta)
        theta = theta_new
        prev_gamma = phi.gamma
        iterations += 1
        if opts.em.loglik_check:
            trace.append(obs_loglik(theta, data))
        if delta < opts.em.delta_tol:
            # only trust a sub-tolerance step if the span was re-searched on
            # this very iteration; otherwise do that search next and re-check
            if refresh or u == 0 or u == data.r:
                converged = True
                break
            force_refresh = True
        else:
            force_refresh = False
    return theta, prev_gamma, iterations, converged, delta


def _fit_envelope_accel(data, u, opts, theta, trace):
    """Accelerated fit: the plain alternating loop run through the
    extrapolating driver, with the span carried along as part of the state.

    Every accepted plain step re-searches the span (with the F safeguard
    against the span it stepped from), exactly as in the literal loop --
    frequent re-searches let the span and the growing coefficient iterate
    adapt to each other, which a converge-then-refresh schedule destroys:
    once a wrong span has been iterated to convergence, the error
    covariance has absorbed the missed signal and the span search can no
    longer see it.  Extrapolated moves keep the anchor step's span (it is
    re-searched on the next plain step anyway, and skipping the search
    keeps speculative evaluations cheap).

    Returns (theta, gamma, evals, converged, delta)."""
    em = opts.em
    delta_fn = _envelope_delta_fn(u)

    if u == 0 or u == data.r:
        # the span cannot move (empty or full), so the fit is a single
        # fixed-span solve; at u == r the envelope M-step reduces to the
        # unconstrained one, and calling that directly makes the driver's
        # evaluation sequence -- hence the estimate -- match the
        # unconstrained EM exactly, not just in the limit
        gamma = np.zeros((data.r, 0)) if u == 0 else np.eye(data.r)
        if u == 0:
            def step_full(th):
                return envelope_m_step(th, e_step(th, data), data, 0, opts,
                                       refresh_span=False)[1]
        else:
            def step_full(th):
                return m_step(th, e_step(th, data), data)

        theta, evals, converged, delta = drive_fixed_point(
            theta, step_full, delta_fn,
            lambda th: obs_loglik(th, data),
            _pack_params, lambda v, like: _unpack_params(v, data), em, trace)
        return theta, gamma, evals, converged, delta

    def step_fn(state):
        th, g = state
        phi, th_new = envelope_m_step(th, e_step(th, data), data, u, opts, g,
                                      refresh_span=True)
        return th_new, phi.gamma

    def spec_step_fn(state):
        th, g = state
        phi, th_new = envelope_m_step(th, e_step(th, data), data, u, opts, g,
                                      refresh_span=False)
        return th_new, phi.gamma

    state, evals, converged, delta = drive_fixed_point(
        (theta, None), step_fn,
        lambda a, b: delta_fn(a[0], b[0]),
        lambda s: obs_loglik(s[0], data),
        lambda s: _pack_params(s[0]),
        lambda v, like: (_unpack_params(v, data), like[1]),
        em, trace, spec_step_fn=spec_step_fn)
    theta, gamma = state
    return theta, gamma, evals, converged, delta


def fit_mixed_envelope(data, u, opts=None, init=None):
    """Fit the mixed effects envelope model at fixed dimension u by EM.

    Same initialization and E-step as the standard EM with the envelope
    M-step replacing the unconstrained one; opts.em.accel picks the plain
    alternating loop or the accelerated outer/inner variant (the default),
    which reach the same fixed points.  The result carries the envelope
    parameters and the BIC value -2 loglik + penalty * p * u.
    Non-convergence is flagged, not raised.
    """
    if opts is None:
        opts = EnvelopeFitOptions()
    if not 0 <= u <= data.r:
        raise ValueError("u must be in [0, %d], got %d" % (data.r, u))
    theta = init if init is not None else initial_params(data)
    trace = []
    if opts.em.accel == "none":
        theta, gamma, evals, converged, delta = _fit_envelope_plain(
            data, u, opts, theta, trace)
    else:
        theta, gamma, evals, converged, delta = _fit_envelope_accel(
            data, u, opts, theta, trace)
    if trace:
        ll_final = trace[-1]
    else:
        ll_final = obs_loglik(theta, data)
        trace = [ll_final]
    bic = -2.0 * ll_final + _bic_penalty_factor(opts, data) * data.p * u
    return FitResult(theta_hat=theta, loglik_trace=np.asarray(trace),
                     iterations=evals, converged=converged,
                     delta_final=float(delta), phi_hat=_final_phi(theta, gamma, data, u),
                     u=u, bic=float(bic))


def select_u_bic(data, opts=None, init=None):
    """Fit u = 0..r and pick the BIC minimizer (ties toward smaller u).

    By default the sweep runs from u = r down to u = 0 as a warm chain:
    the u = r fit (which coincides with the unconstrained EM) starts from
    the standard deterministic initialization, and every following
    dimension starts from the full parameter iterate of the fit one
    dimension above.  The chain exists to make the BIC entries comparable.
    The likelihood has many stationary points per dimension, spread over
    hundreds of log-likelihood units, and independently initialized fits
    land in basins of unrelated quality -- the BIC table then ranks
    optimization luck, not models.  Handing each dimension the converged
    iterate of the dimension above makes every fit a projection-and-refine
    of the same trajectory: its basis search sees the inherited coefficient
    estimate (whose span it truncates by one direction, keeping the
    strongest), so consecutive log-likelihoods differ by what the model
    loses at that dimension rather than by where each fit happened to
    start.  Passing `init` disables the chain and starts every fit from
    that one point.

    The sweep fits are stopped on a likelihood plateau (0.01 over 100
    map evaluations) when the caller has not configured a plateau rule:
    BIC compares likelihood values, and the plateau rule stops the long
    coefficient/covariance attribution crawl once the value has saturated
    far below the coefficient-change tolerance.

    Returns (u_hat, best_fit, bic_table); a failed dimension gets a NaN
    entry and a warning instead of aborting the sweep (the chain then
    continues from the most recent successful fit).
    """
    if opts is None:
        opts = EnvelopeFitOptions()
    if opts.em.ll_plateau_tol <= 0.0:
        em = dataclasses.replace(opts.em, ll_plateau_tol=0.01,
                                 ll_plateau_window=100)
        opts = dataclasses.replace(opts, em=em)
    r = data.r
    chain = init is None
    bic_table = np.full(r + 1, np.nan)
    fits = {}
    for u in range(r, -1, -1):
        try:
            fit = fit_mixed_envelope(data, u, opts, init=init)
        except (SingularCovarianceError, RankDeficientDesignError, np.linalg.LinAlgError) as exc:
            warnings.warn("envelope fit failed at u=%d: %s" % (u, exc))
            continue
        fits[u] = fit
        bic_table[u] = fit.bic
        if chain:
            init = fit.theta_hat
    if not fits:
        raise MixenvError("every envelope dimension failed to fit")
    u_hat = int(np.nanargmin(bic_table))
    return u_hat, fits[u_hat], bic_table

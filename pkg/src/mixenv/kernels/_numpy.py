"""Pure-numpy backend for the hot per-subject kernels.

Mirrors the numba backend function for function; selected with
MIXENV_BACKEND=numpy or automatically when numba is unavailable.
All data arrays are observation-major: Yt is (J_total, r) with one row per
(subject, time) pair, subjects delimited by subj_ptr (n+1 int64 offsets).
Per-subject stacked vectors follow vec(Y_i): time-blocks of r coordinates.
"""

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

LOG_2PI = 1.8378770664093453


def _subject_cov(sigma_eps, sigma_b, z, r, q):
    """Dense (J r) x (J r) covariance I_J kron Sigma_eps + A_i Sigma_b A_i^T.

    z is the (J, q) block of random-effect design rows for one subject;
    A_i stacks A_ij = Z_ij^T kron I_r over time points.
    """
    J = z.shape[0]
    cov = np.zeros((J * r, J * r))
    for k in range(q):
        for l in range(q):
            block = sigma_b[k * r:(k + 1) * r, l * r:(l + 1) * r]
            cov += np.kron(np.outer(z[:, k], z[:, l]), block)
    cov += np.kron(np.eye(J), sigma_eps)
    return cov


def obs_loglik_parts(Yt, Xt, Zt, subj_ptr, alpha, beta, sigma_eps, sigma_b):
    """Observed-data Gaussian log-likelihood.

    Uses the same Kronecker structure as the E-step instead of factoring the
    dense (J_i r) x (J_i r) subject covariance: with W = sigma_eps^{-1} and
    P_i = sigma_b^{-1} + (Z_i Z_i^T) kron W,

      logdet(Sigma_{y_i}) = J_i logdet(sigma_eps) + logdet(sigma_b)
                            + logdet(P_i)                 (determinant lemma)
      d^T Sigma_{y_i}^{-1} d = d^T (I kron W) d - s_i^T P_i^{-1} s_i
                               with s_i = vec(W R_i Z_i^T)  (Woodbury)

    Returns (total, status); status 1 flags a non-PD covariance.
    """
    n = subj_ptr.shape[0] - 1
    r = Yt.shape[1]
    qr = Zt.shape[1] * r
    try:
        low_eps = np.linalg.cholesky(sigma_eps)
        low_b = np.linalg.cholesky(sigma_b)
    except np.linalg.LinAlgError:
        return 0.0, 1
    W = cho_solve((low_eps, True), np.eye(r))
    W = 0.5 * (W + W.T)
    sb_inv = cho_solve((low_b, True), np.eye(qr))
    sb_inv = 0.5 * (sb_inv + sb_inv.T)
    logdet_eps = 2.0 * np.log(np.diag(low_eps)).sum()
    logdet_b = 2.0 * np.log(np.diag(low_b)).sum()
    resid = Yt - alpha[None, :] - Xt @ beta.T
    total = 0.0
    for i in range(n):
        s, e = subj_ptr[i], subj_ptr[i + 1]
        J = e - s
        z = Zt[s:e]
        R = resid[s:e]
        s_rq = W @ R.T @ z
        s_vec = s_rq.reshape(-1, order="F")
        prec = sb_inv + np.kron(z.T @ z, W)
        try:
            low = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            return 0.0, 1
        half = solve_triangular(low, s_vec, lower=True)
        quad = np.einsum("jr,rs,js->", R, W, R) - half @ half
        logdet = (J * logdet_eps + logdet_b
                  + 2.0 * np.log(np.diag(low)).sum())
        total += -0.5 * (J * r * LOG_2PI + logdet + quad)
    return total, 0


def e_step_suffstats(Yt, Xt, Zt, subj_ptr, alpha, beta, sigma_eps_inv, sigma_b_inv):
    """Posterior moments of the random effects plus M-step accumulators.

    Returns (mu, sigma_post, psi_b, sb_mean, m_obs, status) where
      mu[i]          posterior mean of vec(b_i), length qr
      sigma_post[i]  posterior covariance of vec(b_i), (qr, qr)
      psi_b          sum_ij A_ij sigma_post[i] A_ij^T, (r, r)
      sb_mean        (1/n) sum_i (sigma_post[i] + mu_i mu_i^T), (qr, qr)
      m_obs          per-observation posterior-mean random effect contribution
                     A_ij mu_i, laid out (J_total, r)
    """
    n = subj_ptr.shape[0] - 1
    r = Yt.shape[1]
    q = Zt.shape[1]
    qr = q * r
    W = sigma_eps_inv
    mu = np.zeros((n, qr))
    sigma_post = np.zeros((n, qr, qr))
    psi_b = np.zeros((r, r))
    sb_mean = np.zeros((qr, qr))
    m_obs = np.zeros((Yt.shape[0], r))
    resid = Yt - alpha[None, :] - Xt @ beta.T
    for i in range(n):
        s, e = subj_ptr[i], subj_ptr[i + 1]
        z = Zt[s:e]
        R = resid[s:e]
        ZZ = z.T @ z
        s_rq = W @ R.T @ z                       # (r, q)
        s_vec = s_rq.reshape(-1, order="F")      # vec of Sigma_eps^-1 R_i Z_i^T
        prec = sigma_b_inv + np.kron(ZZ, W)
        try:
            low = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            return mu, sigma_post, psi_b, sb_mean, m_obs, 1
        sp = cho_solve((low, True), np.eye(qr))
        sp = 0.5 * (sp + sp.T)
        mui = sp @ s_vec
        mu[i] = mui
        sigma_post[i] = sp
        mui_mat = mui.reshape(r, q, order="F")   # columns are the blocks of mu
        m_obs[s:e] = z @ mui_mat.T
        sp4 = sp.reshape(q, r, q, r)
        psi_b += np.einsum("kl,kalb->ab", ZZ, sp4)
        sb_mean += sp + np.outer(mui, mui)
    sb_mean /= n
    return mu, sigma_post, psi_b, sb_mean, m_obs, 0


def _d_objective(Mk, Nk, w):
    return np.log(w @ Mk @ w) + np.log(w @ Nk @ w)


def _rgd_sphere(Mk, Nk, w0, max_inner, tol):
    """Riemannian gradient descent with Armijo backtracking on the unit sphere.

    Stops on a small Riemannian gradient (squared norm below tol) or when an
    accepted step no longer decreases the objective meaningfully -- descent
    steps make f monotone, so stagnation means a (numerical) local optimum.
    """
    w = w0 / np.sqrt(w0 @ w0)
    f = _d_objective(Mk, Nk, w)
    for _ in range(max_inner):
        a = Mk @ w
        qa = w @ a
        b = Nk @ w
        qb = w @ b
        grad = 2.0 * a / qa + 2.0 * b / qb
        rg = grad - (w @ grad) * w
        gn = rg @ rg
        if gn < tol:
            break
        t = 1.0
        accepted = False
        while t > 1e-18:
            wn = w - t * rg
            wn = wn / np.sqrt(wn @ wn)
            fn = _d_objective(Mk, Nk, wn)
            if fn <= f - 1e-4 * t * gn:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        stalled = f - fn < 1e-13 * (abs(f) + 1.0)
        w, f = wn, fn
        if stalled:
            break
    return w, f


def oned_greedy(M, U, u, starts, max_inner, tol):
    """Greedy column-by-column envelope basis estimation (the 1D algorithm).

    Each step minimizes D_k(w) = log(w^T M_k w) + log(w^T (M_k + U_k)^{-1} w)
    over the unit sphere in the current orthogonal complement, using spectral
    anchor starts plus the supplied random starts, and extends the complement
    with a Householder reflector.  Returns (gamma, status).
    """
    r = M.shape[0]
    gamma = np.zeros((r, u))
    G0 = np.eye(r)
    n_starts = starts.shape[0]
    for k in range(u):
        m = r - k
        Mk = G0.T @ M @ G0
        Mk = 0.5 * (Mk + Mk.T)
        Uk = G0.T @ U @ G0
        MU = Mk + 0.5 * (Uk + Uk.T)
        try:
            low = np.linalg.cholesky(MU)
        except np.linalg.LinAlgError:
            return gamma, 1
        Nk = cho_solve((low, True), np.eye(m))
        Nk = 0.5 * (Nk + Nk.T)
        _, v_m = np.linalg.eigh(Mk)
        _, v_mu = np.linalg.eigh(MU)
        cands = [v_mu[:, -1], v_m[:, 0]]
        if m > 1:
            cands.append(v_mu[:, -2])
            cands.append(v_m[:, 1])
        for sidx in range(n_starts):
            w0 = starts[sidx, :m]
            nrm = np.sqrt(w0 @ w0)
            if nrm > 0.0:
                cands.append(w0 / nrm)
        w_best = None
        f_best = np.inf
        for w0 in cands:
            w, f = _rgd_sphere(Mk, Nk, w0, max_inner, tol)
            if f < f_best:
                w_best, f_best = w, f
        j = int(np.argmax(np.abs(w_best)))
        if w_best[j] < 0.0:
            w_best = -w_best
        gamma[:, k] = G0 @ w_best
        if k < u - 1:
            sign = 1.0 if w_best[0] >= 0.0 else -1.0
            v = w_best.copy()
            v[0] += sign
            H = np.eye(m) - 2.0 * np.outer(v, v) / (v @ v)
            G0 = G0 @ H[:, 1:]
    return gamma, 0

"""Numba backend: njit-compiled twins of the _numpy kernels.

Same signatures and semantics as mixenv.kernels._numpy; layouts are
observation-major with subj_ptr delimiting subjects.  Cholesky is
hand-rolled so a non-PD matrix reports a status flag instead of raising
inside compiled code.
"""

import numpy as np
from numba import njit

LOG_2PI = 1.8378770664093453


@njit(cache=True)
def _chol(a, low):
    """In-place lower Cholesky of symmetric PD a into low; 1 on failure."""
    m = a.shape[0]
    for i in range(m):
        for j in range(m):
            low[i, j] = 0.0
    for i in range(m):
        for j in range(i + 1):
            s = a[i, j]
            for k in range(j):
                s -= low[i, k] * low[j, k]
            if i == j:
                if s <= 0.0:
                    return 1
                low[i, i] = np.sqrt(s)
            else:
                low[i, j] = s / low[j, j]
    return 0


@njit(cache=True)
def _chol_inverse(low, out):
    """out = (low low^T)^{-1} by forward/back substitution on unit vectors."""
    m = low.shape[0]
    y = np.empty(m)
    x = np.empty(m)
    for j in range(m):
        for i in range(m):
            s = 1.0 if i == j else 0.0
            for k in range(i):
                s -= low[i, k] * y[k]
            y[i] = s / low[i, i]
        for i in range(m - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, m):
                s -= low[k, i] * x[k]
            x[i] = s / low[i, i]
        for i in range(m):
            out[i, j] = x[i]
    for i in range(m):
        for j in range(i):
            v = 0.5 * (out[i, j] + out[j, i])
            out[i, j] = v
            out[j, i] = v


@njit(cache=True)
def obs_loglik_parts(Yt, Xt, Zt, subj_ptr, alpha, beta, sigma_eps, sigma_b):
    # Woodbury / determinant-lemma route through the posterior precision
    # P_i = sigma_b^{-1} + (Z_i Z_i^T) kron sigma_eps^{-1}; see the numpy
    # backend for the formulas.
    n = subj_ptr.shape[0] - 1
    r = Yt.shape[1]
    p = Xt.shape[1]
    q = Zt.shape[1]
    qr = q * r
    low_eps = np.empty((r, r))
    if _chol(sigma_eps, low_eps) != 0:
        return 0.0, 1
    low_b = np.empty((qr, qr))
    if _chol(sigma_b, low_b) != 0:
        return 0.0, 1
    W = np.empty((r, r))
    _chol_inverse(low_eps, W)
    sb_inv = np.empty((qr, qr))
    _chol_inverse(low_b, sb_inv)
    logdet_eps = 0.0
    for a in range(r):
        logdet_eps += 2.0 * np.log(low_eps[a, a])
    logdet_b = 0.0
    for a in range(qr):
        logdet_b += 2.0 * np.log(low_b[a, a])
    total = 0.0
    t = np.empty(r)
    for i in range(n):
        s = subj_ptr[i]
        e = subj_ptr[i + 1]
        J = e - s
        zz = np.zeros((q, q))
        for j in range(J):
            for k in range(q):
                for l in range(q):
                    zz[k, l] += Zt[s + j, k] * Zt[s + j, l]
        s_vec = np.zeros(qr)
        quad = 0.0
        for j in range(J):
            for a in range(r):
                acc = Yt[s + j, a] - alpha[a]
                for c in range(p):
                    acc -= beta[a, c] * Xt[s + j, c]
                t[a] = acc
            for a in range(r):
                acc = 0.0
                for b in range(r):
                    acc += W[a, b] * t[b]
                quad += t[a] * acc
                for k in range(q):
                    s_vec[k * r + a] += Zt[s + j, k] * acc
        prec = np.empty((qr, qr))
        for k in range(q):
            for l in range(q):
                for a in range(r):
                    for b in range(r):
                        prec[k * r + a, l * r + b] = sb_inv[k * r + a, l * r + b] + zz[k, l] * W[a, b]
        low = np.empty((qr, qr))
        if _chol(prec, low) != 0:
            return 0.0, 1
        half = np.empty(qr)
        logdet_prec = 0.0
        for i2 in range(qr):
            acc = s_vec[i2]
            for k in range(i2):
                acc -= low[i2, k] * half[k]
            half[i2] = acc / low[i2, i2]
            quad -= half[i2] * half[i2]
            logdet_prec += 2.0 * np.log(low[i2, i2])
        total += -0.5 * (J * r * LOG_2PI + J * logdet_eps + logdet_b
                         + logdet_prec + quad)
    return total, 0


@njit(cache=True)
def e_step_suffstats(Yt, Xt, Zt, subj_ptr, alpha, beta, sigma_eps_inv, sigma_b_inv):
    n = subj_ptr.shape[0] - 1
    r = Yt.shape[1]
    p = Xt.shape[1]
    q = Zt.shape[1]
    qr = q * r
    W = sigma_eps_inv
    mu = np.zeros((n, qr))
    sigma_post = np.zeros((n, qr, qr))
    psi_b = np.zeros((r, r))
    sb_mean = np.zeros((qr, qr))
    m_obs = np.zeros((Yt.shape[0], r))
    t = np.empty(r)
    for i in range(n):
        s = subj_ptr[i]
        e = subj_ptr[i + 1]
        J = e - s
        zz = np.zeros((q, q))
        for j in range(J):
            for k in range(q):
                for l in range(q):
                    zz[k, l] += Zt[s + j, k] * Zt[s + j, l]
        s_vec = np.zeros(qr)
        for j in range(J):
            # residual then t = Sigma_eps^{-1} resid
            for a in range(r):
                acc = Yt[s + j, a] - alpha[a]
                for c in range(p):
                    acc -= beta[a, c] * Xt[s + j, c]
                t[a] = acc
            for a in range(r):
                acc = 0.0
                for b in range(r):
                    acc += W[a, b] * t[b]
                for k in range(q):
                    s_vec[k * r + a] += Zt[s + j, k] * acc
        prec = np.empty((qr, qr))
        for k in range(q):
            for l in range(q):
                for a in range(r):
                    for b in range(r):
                        prec[k * r + a, l * r + b] = sigma_b_inv[k * r + a, l * r + b] + zz[k, l] * W[a, b]
        low = np.empty((qr, qr))
        if _chol(prec, low) != 0:
            return mu, sigma_post, psi_b, sb_mean, m_obs, 1
        sp = np.empty((qr, qr))
        _chol_inverse(low, sp)
        mui = np.zeros(qr)
        for a in range(qr):
            acc = 0.0
            for b in range(qr):
                acc += sp[a, b] * s_vec[b]
            mui[a] = acc
        for a in range(qr):
            mu[i, a] = mui[a]
            for b in range(qr):
                sigma_post[i, a, b] = sp[a, b]
        for j in range(J):
            for a in range(r):
                acc = 0.0
                for k in range(q):
                    acc += mui[k * r + a] * Zt[s + j, k]
                m_obs[s + j, a] = acc
        for k in range(q):
            for l in range(q):
                w_kl = zz[k, l]
                for a in range(r):
                    for b in range(r):
                        psi_b[a, b] += w_kl * sp[k * r + a, l * r + b]
        for a in range(qr):
            for b in range(qr):
                sb_mean[a, b] += sp[a, b] + mui[a] * mui[b]
    for a in range(qr):
        for b in range(qr):
            sb_mean[a, b] /= n
    return mu, sigma_post, psi_b, sb_mean, m_obs, 0


@njit(cache=True)
def _d_objective(Mk, Nk, w):
    m = w.shape[0]
    qa = 0.0
    qb = 0.0
    for i in range(m):
        ai = 0.0
        bi = 0.0
        for j in range(m):
            ai += Mk[i, j] * w[j]
            bi += Nk[i, j] * w[j]
        qa += w[i] * ai
        qb += w[i] * bi
    return np.log(qa) + np.log(qb)


@njit(cache=True)
def _rgd_sphere(Mk, Nk, w0, max_inner, tol):
    m = w0.shape[0]
    w = w0.copy()
    nrm = 0.0
    for i in range(m):
        nrm += w[i] * w[i]
    nrm = np.sqrt(nrm)
    for i in range(m):
        w[i] /= nrm
    f = _d_objective(Mk, Nk, w)
    a = np.empty(m)
    b = np.empty(m)
    rg = np.empty(m)
    wn = np.empty(m)
    for _ in range(max_inner):
        qa = 0.0
        qb = 0.0
        for i in range(m):
            ai = 0.0
            bi = 0.0
            for j in range(m):
                ai += Mk[i, j] * w[j]
                bi += Nk[i, j] * w[j]
            a[i] = ai
            b[i] = bi
            qa += w[i] * ai
            qb += w[i] * bi
        wg = 0.0
        for i in range(m):
            rg[i] = 2.0 * a[i] / qa + 2.0 * b[i] / qb
            wg += w[i] * rg[i]
        gn = 0.0
        for i in range(m):
            rg[i] -= wg * w[i]
            gn += rg[i] * rg[i]
        if gn < tol:
            break
        t = 1.0
        accepted = False
        fn = f
        while t > 1e-18:
            nrm = 0.0
            for i in range(m):
                wn[i] = w[i] - t * rg[i]
                nrm += wn[i] * wn[i]
            nrm = np.sqrt(nrm)
            for i in range(m):
                wn[i] /= nrm
            fn = _d_objective(Mk, Nk, wn)
            if fn <= f - 1e-4 * t * gn:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        for i in range(m):
            w[i] = wn[i]
        stalled = f - fn < 1e-13 * (abs(f) + 1.0)
        f = fn
        if stalled:
            break
    return w, f


@njit(cache=True)
def oned_greedy(M, U, u, starts, max_inner, tol):
    r = M.shape[0]
    gamma = np.zeros((r, u))
    G0 = np.eye(r)
    n_starts = starts.shape[0]
    for k in range(u):
        m = r - k
        G0c = np.ascontiguousarray(G0)
        G0t = np.ascontiguousarray(G0.T)
        Mk = np.dot(G0t, np.dot(M, G0c))
        Uk = np.dot(G0t, np.dot(U, G0c))
        MU = np.empty((m, m))
        for i in range(m):
            for j in range(m):
                MU[i, j] = 0.5 * (Mk[i, j] + Mk[j, i]) + 0.5 * (Uk[i, j] + Uk[j, i])
        for i in range(m):
            for j in range(i):
                v = 0.5 * (Mk[i, j] + Mk[j, i])
                Mk[i, j] = v
                Mk[j, i] = v
        low = np.empty((m, m))
        if _chol(MU, low) != 0:
            return gamma, 1
        Nk = np.empty((m, m))
        _chol_inverse(low, Nk)
        _, v_m = np.linalg.eigh(Mk)
        _, v_mu = np.linalg.eigh(MU)
        n_anchor = 4 if m > 1 else 2
        cands = np.empty((n_anchor + n_starts, m))
        for i in range(m):
            cands[0, i] = v_mu[i, m - 1]
            cands[1, i] = v_m[i, 0]
        if m > 1:
            for i in range(m):
                cands[2, i] = v_mu[i, m - 2]
                cands[3, i] = v_m[i, 1]
        n_cand = n_anchor
        for sidx in range(n_starts):
            nrm = 0.0
            for i in range(m):
                nrm += starts[sidx, i] * starts[sidx, i]
            nrm = np.sqrt(nrm)
            if nrm > 0.0:
                for i in range(m):
                    cands[n_cand, i] = starts[sidx, i] / nrm
                n_cand += 1
        f_best = np.inf
        w_best = np.empty(m)
        for c in range(n_cand):
            w, f = _rgd_sphere(Mk, Nk, cands[c], max_inner, tol)
            if f < f_best:
                f_best = f
                for i in range(m):
                    w_best[i] = w[i]
        jmax = 0
        amax = -1.0
        for i in range(m):
            av = abs(w_best[i])
            if av > amax:
                amax = av
                jmax = i
        if w_best[jmax] < 0.0:
            for i in range(m):
                w_best[i] = -w_best[i]
        for i in range(r):
            acc = 0.0
            for j in range(m):
                acc += G0[i, j] * w_best[j]
            gamma[i, k] = acc
        if k < u - 1:
            sign = 1.0 if w_best[0] >= 0.0 else -1.0
            v = w_best.copy()
            v[0] += sign
            vv = 0.0
            for i in range(m):
                vv += v[i] * v[i]
            H = np.empty((m, m))
            for i in range(m):
                for j in range(m):
                    H[i, j] = (1.0 if i == j else 0.0) - 2.0 * v[i] * v[j] / vv
            G0new = np.empty((r, m - 1))
            for i in range(r):
                for j in range(1, m):
                    acc = 0.0
                    for l in range(m):
                        acc += G0[i, l] * H[l, j]
                    G0new[i, j - 1] = acc
            G0 = G0new
    return gamma, 0

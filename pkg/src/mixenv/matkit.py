"""Structured matrix operators: vec/vech, expansion/contraction/commutation
matrices, Kronecker products, projectors, generalized inverses and restricted
log-determinants.

Everything here is a pure function of its inputs.  Column-major (Fortran)
ordering is used throughout for vec/vech, matching the usual convention
vec(AXB) = (B^T kron A) vec(X).
"""

import numpy as np

DEFAULT_RANK_TOL = 1e-10


def vec(m):
    """Stack the columns of a matrix into one vector (column-major)."""
    m = np.asarray(m, dtype=float)
    return m.reshape(-1, order="F").copy()


def unvec(v, rows, cols):
    """Inverse of vec: reshape a vector back into a rows x cols matrix."""
    v = np.asarray(v, dtype=float)
    if v.size != rows * cols:
        raise ValueError("unvec: size mismatch, got %d for %dx%d" % (v.size, rows, cols))
    return v.reshape(rows, cols, order="F").copy()


def vech_dim(r):
    """Length of vech of an r x r symmetric matrix: r(r+1)/2."""
    return r * (r + 1) // 2


def vech(s):
    """Half-vectorization: column-major scan of the lower triangle (diagonal included).

    Parameters
    ----------
    s : (r, r) array, symmetric

    Returns
    -------
    (r*(r+1)/2,) vector
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("vech expects a square matrix, got shape %s" % (s.shape,))
    r = s.shape[0]
    rows, cols = np.tril_indices(r)
    # tril_indices walks row-major; column-major lower-triangle scan wants
    # (0,0),(1,0),...,(r-1,0),(1,1),... i.e. sort by column first.
    order = np.lexsort((rows, cols))
    return s[rows[order], cols[order]].copy()


def unvech(v):
    """Rebuild the symmetric matrix whose vech (column-major) is v."""
    v = np.asarray(v, dtype=float)
    d = v.size
    r = int(round((np.sqrt(8 * d + 1) - 1) / 2))
    if r * (r + 1) // 2 != d:
        raise ValueError("unvech: length %d is not a triangular number" % d)
    s = np.zeros((r, r))
    k = 0
    for j in range(r):
        for i in range(j, r):
            s[i, j] = v[k]
            s[j, i] = v[k]
            k += 1
    return s


def expansion_matrix(r):
    """E_r with vec(S) = E_r vech(S) for symmetric S. Shape (r^2, r(r+1)/2), entries 0/1."""
    d = r * (r + 1) // 2
    e = np.zeros((r * r, d))
    k = 0
    for j in range(r):
        for i in range(j, r):
            e[j * r + i, k] = 1.0
            e[i * r + j, k] = 1.0
            k += 1
    return e


def contraction_matrix(r):
    """C_r with vech(S) = C_r vec(S). Shape (r(r+1)/2, r^2), entries 0/1.

    Picks the lower-triangle entries out of vec(S); C_r E_r = I exactly.
    """
    d = r * (r + 1) // 2
    c = np.zeros((d, r * r))
    k = 0
    for j in range(r):
        for i in range(j, r):
            c[k, j * r + i] = 1.0
            k += 1
    return c


def commutation_matrix(s, m):
    """K_{sm} with K_{sm} vec(A) = vec(A^T) for any s x m matrix A.

    A permutation matrix of size sm x sm.
    """
    k = np.zeros((s * m, s * m))
    for i in range(s):
        for j in range(m):
            # vec(A) puts A(i,j) at j*s+i; vec(A^T) puts it at i*m+j
            k[i * m + j, j * s + i] = 1.0
    return k


def kron(a, b):
    """Kronecker product (thin wrapper so all call sites share one entry point)."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def pinv(a, rank_tol=DEFAULT_RANK_TOL):
    """Moore-Penrose pseudo-inverse with a relative singular value cutoff.

    Singular values below rank_tol * s_max are treated as exactly zero.
    The zero matrix maps to the zero matrix.
    """
    a = np.asarray(a, dtype=float)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        return np.zeros(a.T.shape)
    keep = s > rank_tol * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def projector(b, rank_tol=DEFAULT_RANK_TOL):
    """Orthogonal projector P_B = B (B^T B)^dagger B^T onto span(B)."""
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[1] == 0:
        return np.zeros((b.shape[0], b.shape[0]))
    p = b @ pinv(b.T @ b, rank_tol) @ b.T
    return 0.5 * (p + p.T)


def logdet0(s, rank_tol=DEFAULT_RANK_TOL):
    """Log product of the nonzero eigenvalues of a symmetric PSD matrix.

    Eigenvalues above rank_tol * lambda_max count; those in [-tol, tol] are
    treated as zero.  An eigenvalue below -rank_tol * lambda_max means the
    input is indefinite and raises ValueError.  For a full-rank PD matrix
    this is the ordinary log-determinant.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("logdet0 expects a square matrix")
    if s.shape[0] == 0:
        return 0.0
    w = np.linalg.eigvalsh(0.5 * (s + s.T))
    wmax = w[-1]
    if wmax <= 0.0:
        if np.all(np.abs(w) <= rank_tol * max(1.0, abs(w[0]))):
            return 0.0  # numerically zero matrix: empty product
        raise ValueError("logdet0: matrix has no positive eigenvalues")
    tol = rank_tol * wmax
    if w[0] < -tol:
        raise ValueError("logdet0: indefinite input (min eigenvalue %g)" % w[0])
    pos = w[w > tol]
    return float(np.sum(np.log(pos)))

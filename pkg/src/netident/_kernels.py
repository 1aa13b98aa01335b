"""Compiled inner loops for the Riccati recursion and Kalman filters.

Matrices here are tiny (n <= ~12, p <= 6), so explicit loops beat BLAS calls.
Status codes: 0 ok, 1 innovation covariance not positive definite,
2 iteration cap reached.
"""

import numpy as np
from numba import njit

FREEZE_RTOL = 1e-14


@njit(cache=True)
def _mm(A, B, out):
    n, k = A.shape
    m = B.shape[1]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += A[i, l] * B[l, j]
            out[i, j] = s


@njit(cache=True)
def _mmt(A, B, out):
    # out = A @ B.T
    n, k = A.shape
    m = B.shape[0]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += A[i, l] * B[j, l]
            out[i, j] = s


@njit(cache=True)
def _chol(A, L):
    p = A.shape[0]
    for i in range(p):
        for j in range(p):
            L[i, j] = 0.0
    for j in range(p):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, p):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return True


@njit(cache=True)
def _right_solve_lt(M, L, Z):
    # Z L^T = M  (rows of Z solved independently; L lower triangular)
    n, p = M.shape
    for i in range(n):
        for j in range(p):
            s = M[i, j]
            for k in range(j):
                s -= Z[i, k] * L[j, k]
            Z[i, j] = s / L[j, j]


@njit(cache=True)
def _right_solve_l(Z, L, K):
    # K L = Z
    n, p = Z.shape
    for i in range(n):
        for j in range(p - 1, -1, -1):
            s = Z[i, j]
            for k in range(j + 1, p):
                s -= K[i, k] * L[k, j]
            K[i, j] = s / L[j, j]


@njit(cache=True)
def _riccati_update(F, H, Q, S, R, Sig, Sig_next, K, Se, L, FS, HS, M, Z):
    """One step: Se, K and Sig_next from Sig.  Returns False if Se is not PD."""
    n = F.shape[0]
    p = H.shape[0]
    _mm(F, Sig, FS)
    _mm(H, Sig, HS)
    _mmt(HS, H, Se)
    for i in range(p):
        Se[i, i] += R[i, i]
        for j in range(i + 1, p):
            v = 0.5 * (Se[i, j] + Se[j, i])
            Se[i, j] = v + R[i, j]
            Se[j, i] = v + R[j, i]
    if not _chol(Se, L):
        return False
    _mmt(FS, H, M)
    for i in range(n):
        for j in range(p):
            M[i, j] += S[i, j]
    _right_solve_lt(M, L, Z)
    _right_solve_l(Z, L, K)
    _mmt(FS, F, Sig_next)
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(p):
                s += Z[i, k] * Z[j, k]
            Sig_next[i, j] += Q[i, j] - s
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (Sig_next[i, j] + Sig_next[j, i])
            Sig_next[i, j] = v
            Sig_next[j, i] = v
    return True


@njit(cache=True)
def riccati_step(F, H, Q, S, R, Sig):
    n = F.shape[0]
    p = H.shape[0]
    Sig_next = np.empty((n, n))
    K = np.empty((n, p))
    Se = np.empty((p, p))
    L = np.empty((p, p))
    ok = _riccati_update(
        F, H, Q, S, R, Sig, Sig_next, K, Se, L,
        np.empty((n, n)), np.empty((p, n)), np.empty((n, p)), np.empty((n, p)),
    )
    return ok, Sig_next, K, Se


@njit(cache=True)
def riccati_iterate(F, H, Q, S, R, Sig0, tol, max_iter, record):
    """Fixed-point iteration of the Riccati recursion.

    Stops when ||Sig_{k+1} - Sig_k||_2 / (1 + ||Sig_k||_2) <= tol.  When
    ``record`` is positive, the first ``record`` iterates are stored.
    """
    n = F.shape[0]
    p = H.shape[0]
    Sig = Sig0.copy()
    Sig_next = np.empty((n, n))
    K = np.empty((n, p))
    Se = np.empty((p, p))
    L = np.empty((p, p))
    FS = np.empty((n, n))
    HS = np.empty((p, n))
    M = np.empty((n, p))
    Z = np.empty((n, p))
    D = np.empty((n, n))
    hist = np.zeros((record, n, n))
    if record > 0:
        hist[0] = Sig
    for it in range(max_iter):
        if not _riccati_update(F, H, Q, S, R, Sig, Sig_next, K, Se, L, FS, HS, M, Z):
            return 1, Sig, it, hist
        if it + 1 < record:
            hist[it + 1] = Sig_next
        dfro = 0.0
        sfro = 0.0
        for i in range(n):
            for j in range(n):
                D[i, j] = Sig_next[i, j] - Sig[i, j]
                dfro += D[i, j] * D[i, j]
                sfro += Sig[i, j] * Sig[i, j]
        # 2-norms only once the cheaper Frobenius bound is close
        if np.sqrt(dfro) <= tol * (1.0 + np.sqrt(sfro)) * np.sqrt(n):
            d2 = np.max(np.abs(np.linalg.eigvalsh(D)))
            s2 = np.max(np.abs(np.linalg.eigvalsh(Sig)))
            if d2 <= tol * (1.0 + s2):
                for i in range(n):
                    for j in range(n):
                        Sig[i, j] = Sig_next[i, j]
                for h in range(it + 2, record):
                    hist[h] = Sig
                return 0, Sig, it + 1, hist
        for i in range(n):
            for j in range(n):
                Sig[i, j] = Sig_next[i, j]
    return 2, Sig, max_iter, hist


@njit(cache=True)
def tv_filter(F, G, H, J, Q, S, R, Sig1, r, x, store):
    """Time-varying Kalman filter with xi_1 = 0 and given Sigma_1.

    Returns (status, eps, Se_seq, xi_seq, K_seq, quad, logdet).  The
    Riccati part is frozen once it has converged to FREEZE_RTOL.
    """
    N = x.shape[0]
    n = F.shape[0]
    p = H.shape[0]
    m = G.shape[1]
    Sig = Sig1.copy()
    Sig_next = np.empty((n, n))
    K = np.zeros((n, p))
    Se = np.zeros((p, p))
    L = np.zeros((p, p))
    FS = np.empty((n, n))
    HS = np.empty((p, n))
    Mb = np.empty((n, p))
    Z = np.empty((n, p))
    xi = np.zeros(n)
    xi_new = np.empty(n)
    eps = np.empty(p)
    w = np.empty(p)
    eps_out = np.zeros((N, p))
    if store:
        se_out = np.zeros((N, p, p))
        xi_out = np.zeros((N, n))
        k_out = np.zeros((N, n, p))
    else:
        se_out = np.zeros((0, p, p))
        xi_out = np.zeros((0, n))
        k_out = np.zeros((0, n, p))
    quad = np.zeros(N)
    logdet = np.zeros(N)
    frozen = False
    ld = 0.0
    for k in range(N):
        if not frozen:
            if not _riccati_update(F, H, Q, S, R, Sig, Sig_next, K, Se, L, FS, HS, Mb, Z):
                return 1, eps_out, se_out, xi_out, k_out, quad, logdet
            ld = 0.0
            for i in range(p):
                ld += 2.0 * np.log(L[i, i])
            dmax = 0.0
            smax = 0.0
            for i in range(n):
                for j in range(n):
                    d = abs(Sig_next[i, j] - Sig[i, j])
                    if d > dmax:
                        dmax = d
                    s = abs(Sig[i, j])
                    if s > smax:
                        smax = s
                    Sig[i, j] = Sig_next[i, j]
            if dmax <= FREEZE_RTOL * (1.0 + smax):
                frozen = True
        for i in range(p):
            s = x[k, i]
            for j in range(n):
                s -= H[i, j] * xi[j]
            for j in range(m):
                s -= J[i, j] * r[k, j]
            eps[i] = s
            eps_out[k, i] = s
        q = 0.0
        for i in range(p):
            s = eps[i]
            for j in range(i):
                s -= L[i, j] * w[j]
            w[i] = s / L[i, i]
            q += w[i] * w[i]
        quad[k] = q
        logdet[k] = ld
        if store:
            for i in range(p):
                for j in range(p):
                    se_out[k, i, j] = Se[i, j]
            for i in range(n):
                xi_out[k, i] = xi[i]
                for j in range(p):
                    k_out[k, i, j] = K[i, j]
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += F[i, j] * xi[j]
            for j in range(m):
                s += G[i, j] * r[k, j]
            for j in range(p):
                s += K[i, j] * eps[j]
            xi_new[i] = s
        for i in range(n):
            xi[i] = xi_new[i]
    return 0, eps_out, se_out, xi_out, k_out, quad, logdet


@njit(cache=True)
def stationary_filter(F, G, H, J, K, L, r, x):
    """Time-invariant predictor with xi_1 = 0; L is chol(Sigma_eps)."""
    N = x.shape[0]
    n = F.shape[0]
    p = H.shape[0]
    m = G.shape[1]
    xi = np.zeros(n)
    xi_new = np.empty(n)
    eps = np.empty(p)
    w = np.empty(p)
    eps_out = np.zeros((N, p))
    xi_out = np.zeros((N, n))
    quad = np.zeros(N)
    for k in range(N):
        for i in range(n):
            xi_out[k, i] = xi[i]
        for i in range(p):
            s = x[k, i]
            for j in range(n):
                s -= H[i, j] * xi[j]
            for j in range(m):
                s -= J[i, j] * r[k, j]
            eps[i] = s
            eps_out[k, i] = s
        q = 0.0
        for i in range(p):
            s = eps[i]
            for j in range(i):
                s -= L[i, j] * w[j]
            w[i] = s / L[i, i]
            q += w[i] * w[i]
        quad[k] = q
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += F[i, j] * xi[j]
            for j in range(m):
                s += G[i, j] * r[k, j]
            for j in range(p):
                s += K[i, j] * eps[j]
            xi_new[i] = s
        for i in range(n):
            xi[i] = xi_new[i]
    return eps_out, xi_out, quad


@njit(cache=True)
def ss_simulate(F, G, H, J, x0, w):
    """x_{k+1} = F x_k + G w_k, z_k = H x_k + J w_k."""
    N = w.shape[0]
    n = F.shape[0]
    q = H.shape[0]
    m = G.shape[1]
    x = x0.copy()
    xn = np.empty(n)
    out = np.zeros((N, q))
    for k in range(N):
        for i in range(q):
            s = 0.0
            for j in range(n):
                s += H[i, j] * x[j]
            for j in range(m):
                s += J[i, j] * w[k, j]
            out[k, i] = s
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += F[i, j] * x[j]
            for j in range(m):
                s += G[i, j] * w[k, j]
            xn[i] = s
        for i in range(n):
            x[i] = xn[i]
    return out

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled mirrors of the four ELBO evaluators in _core_py.

Same contracts, layouts, jitter schedules and counter semantics; explicit
loops replace the vectorised NumPy, so results agree to rounding error.
Sampling paths are not duplicated here — they always run in _core_py.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, sin, sqrt

cnp.import_array()

cdef double LOG2PI = 1.8378770664093454835607
cdef double PI = 3.14159265358979323846

FAM_SE = 0
FAM_PERIODIC = 1
MEAN_ZERO = 0
MEAN_IDENTITY = 1
CHAINED_RETRY_FACTOR = 1e-4


cdef inline double kern1(cnp.int64_t fam, double var, double gam, double per,
                         double dx) noexcept:
    cdef double s
    if fam == 0:
        return var * exp(dx * dx / (-2.0 * gam * gam))
    s = sin(PI * fabs(dx) / per)
    return var * exp(-2.0 * s * s / (gam * gam))


cdef inline double mean1(cnp.int64_t code, double t) noexcept:
    if code == 1:
        return t
    return 0.0


cdef int _chol_lower(double[:, ::1] A) noexcept:
    """In-place lower Cholesky, zeroing the upper triangle. 0 ok, -1 not PD."""
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not s > 0.0:
            return -1
        A[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / A[j, j]
    for i in range(n):
        for j in range(i + 1, n):
            A[i, j] = 0.0
    return 0


cdef double _chol_schedule(double[:, ::1] K, double[:, ::1] out,
                           double[::1] sched, Py_ssize_t nsched) noexcept:
    """out <- chol(K + jit I) for the first feasible jit; returns it, or -1."""
    cdef Py_ssize_t n = K.shape[0]
    cdef Py_ssize_t i, j, t
    for t in range(nsched):
        for i in range(n):
            for j in range(n):
                out[i, j] = K[i, j]
            out[i, i] += sched[t]
        if _chol_lower(out) == 0:
            return sched[t]
    return -1.0


cdef void _fwd(double[:, ::1] L, double[::1] b, double[::1] out) noexcept:
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]


cdef void _bwd(double[:, ::1] L, double[::1] b, double[::1] out) noexcept:
    """Solves L^T out = b."""
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


cdef void _alpha(double[:, ::1] Lz, double[::1] kvec, double[::1] tmp,
                 double[::1] a) noexcept:
    """a = (Lz Lz^T)^{-1} kvec."""
    _fwd(Lz, kvec, tmp)
    _bwd(Lz, tmp, a)


cdef double _kl_chol(double[::1] mq, double[:, :] Cq, double[::1] mp,
                     double[:, ::1] Lp, double[::1] col, double[::1] tmp) noexcept:
    """max(KL(N(mq, tril(Cq) tril(Cq)^T) || N(mp, Lp Lp^T)), 0)."""
    cdef Py_ssize_t n = mq.shape[0]
    cdef Py_ssize_t i, j
    cdef double fro = 0.0, quad = 0.0, logdet = 0.0, kl
    for j in range(n):
        for i in range(n):
            col[i] = Cq[i, j] if i >= j else 0.0
        _fwd(Lp, col, tmp)
        for i in range(n):
            fro += tmp[i] * tmp[i]
    for i in range(n):
        col[i] = mq[i] - mp[i]
    _fwd(Lp, col, tmp)
    for i in range(n):
        quad += tmp[i] * tmp[i]
    for i in range(n):
        logdet += log(Lp[i, i]) - log(fabs(Cq[i, i]))
    kl = 0.5 * (fro + quad - n) + logdet
    return kl if kl > 0.0 else 0.0


cdef double _prior_chol(cnp.int64_t fam, double var, double gam, double per,
                        double[:, ::1] z, Py_ssize_t ell, double[:, ::1] K,
                        double[:, ::1] Lz, double[::1] sched) noexcept:
    """Cholesky of K(z_ell, z_ell) under the minimal jitter schedule."""
    cdef Py_ssize_t M = z.shape[1]
    cdef Py_ssize_t i, j
    for i in range(M):
        for j in range(M):
            K[i, j] = kern1(fam, var, gam, per, z[ell, i] - z[ell, j])
    sched[0] = 0.0
    sched[1] = 1e-10 * var
    sched[2] = 1e-8 * var
    sched[3] = 1e-6 * var
    return _chol_schedule(K, Lz, sched, 4)


cdef void _tril_square(double[:, :] C, double[:, ::1] out) noexcept:
    """out = tril(C) tril(C)^T."""
    cdef Py_ssize_t n = C.shape[0]
    cdef Py_ssize_t i, j, k, top
    cdef double s
    for i in range(n):
        for j in range(n):
            top = i if i < j else j
            s = 0.0
            for k in range(top + 1):
                s += C[i, k] * C[j, k]
            out[i, j] = s


cdef double _loglik_row(double[::1] y, double[:, ::1] fL, Py_ssize_t s,
                        double sigma2) noexcept:
    cdef Py_ssize_t n
    cdef double acc = 0.0, r
    cdef double c0 = -0.5 * (LOG2PI + log(sigma2))
    for n in range(y.shape[0]):
        r = y[n] - fL[s, n]
        acc += c0 - r * r / (2.0 * sigma2)
    return acc


cdef object _not_psd(double var):
    return np.linalg.LinAlgError(
        "inducing kernel matrix not PSD within jitter schedule "
        "(last %g)" % (1e-6 * var)
    )


# ---------------------------------------------------------------------------
# mean-field scheme
# ---------------------------------------------------------------------------


def mf_elbo(fams, var, gam, per, meanv, z, m, C, x, y, double sigma2, eps):
    cdef cnp.int64_t[::1] fams_ = np.ascontiguousarray(fams, dtype=np.int64)
    cdef double[::1] var_ = np.ascontiguousarray(var, dtype=np.float64)
    cdef double[::1] gam_ = np.ascontiguousarray(gam, dtype=np.float64)
    cdef double[::1] per_ = np.ascontiguousarray(per, dtype=np.float64)
    cdef cnp.int64_t[::1] meanv_ = np.ascontiguousarray(meanv, dtype=np.int64)
    cdef double[:, ::1] z_ = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, ::1] m_ = np.ascontiguousarray(m, dtype=np.float64)
    cdef double[:, :, ::1] C_ = np.ascontiguousarray(C, dtype=np.float64)
    cdef double[::1] x_ = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[:, :, ::1] eps_ = np.ascontiguousarray(eps, dtype=np.float64)

    cdef Py_ssize_t S = eps_.shape[0], L = eps_.shape[1], N = eps_.shape[2]
    cdef Py_ssize_t M = z_.shape[1]
    cdef Py_ssize_t ell, i, j, n, sidx

    draws_arr = np.empty((L, S, N))
    kls_arr = np.empty(L)
    e_rows_arr = np.empty(S)
    cdef double[:, :, ::1] draws = draws_arr
    cdef double[::1] kls = kls_arr
    cdef double[::1] e_rows = e_rows_arr

    Kb = np.empty((M, M)); Lzb = np.empty((M, M)); Smb = np.empty((M, M))
    cdef double[:, ::1] K = Kb, Lz = Lzb, Sm = Smb
    scratch = np.empty((7, M))
    cdef double[::1] mu_z = scratch[0], d = scratch[1], kvec = scratch[2]
    cdef double[::1] tmp = scratch[3], a = scratch[4], col = scratch[5]
    cdef double[::1] sol = scratch[6]
    cdef double[::1] sched = np.empty(4)

    cdef double t, mu, qf, quad, s2, sd, s
    for ell in range(L):
        if _prior_chol(fams_[ell], var_[ell], gam_[ell], per_[ell], z_, ell,
                       K, Lz, sched) < 0.0:
            raise _not_psd(var_[ell])
        for i in range(M):
            mu_z[i] = mean1(meanv_[ell], z_[ell, i])
            d[i] = m_[ell, i] - mu_z[i]
        _tril_square(C_[ell], Sm)
        if ell == 0:
            for n in range(N):
                t = x_[n]
                for i in range(M):
                    kvec[i] = kern1(fams_[0], var_[0], gam_[0], per_[0],
                                    z_[0, i] - t)
                _alpha(Lz, kvec, tmp, a)
                mu = mean1(meanv_[0], t)
                qf = 0.0
                quad = 0.0
                for i in range(M):
                    mu += a[i] * d[i]
                    qf += kvec[i] * a[i]
                    s = 0.0
                    for j in range(M):
                        s += Sm[i, j] * a[j]
                    quad += a[i] * s
                s2 = var_[0] - qf + quad
                sd = sqrt(s2) if s2 > 0.0 else 0.0
                for sidx in range(S):
                    draws[0, sidx, n] = mu + sd * eps_[sidx, 0, n]
        else:
            for sidx in range(S):
                for n in range(N):
                    t = draws[ell - 1, sidx, n]
                    for i in range(M):
                        kvec[i] = kern1(fams_[ell], var_[ell], gam_[ell],
                                        per_[ell], z_[ell, i] - t)
                    _alpha(Lz, kvec, tmp, a)
                    mu = mean1(meanv_[ell], t)
                    qf = 0.0
                    quad = 0.0
                    for i in range(M):
                        mu += a[i] * d[i]
                        qf += kvec[i] * a[i]
                        s = 0.0
                        for j in range(M):
                            s += Sm[i, j] * a[j]
                        quad += a[i] * s
                    s2 = var_[ell] - qf + quad
                    sd = sqrt(s2) if s2 > 0.0 else 0.0
                    draws[ell, sidx, n] = mu + sd * eps_[sidx, ell, n]
        kls[ell] = _kl_chol(m_[ell], C_[ell], mu_z, Lz, col, sol)

    cdef double[:, ::1] fL = draws_arr[L - 1]
    for sidx in range(S):
        e_rows[sidx] = _loglik_row(y_, fL, sidx, sigma2)
    return e_rows_arr, kls_arr


# ---------------------------------------------------------------------------
# jointly-Gaussian scheme (chain parametrisation)
# ---------------------------------------------------------------------------


cdef void _chain_moments(double[::1] m1, double[:, :] C11, double[:, :, ::1] A,
                         double[:, ::1] b, double[:, :, ::1] C,
                         double[:, ::1] means, double[:, :, ::1] covs,
                         double[:, ::1] work) noexcept:
    """Marginal means/covariances implied by the chain parameters."""
    cdef Py_ssize_t L = A.shape[0] + 1
    cdef Py_ssize_t M = m1.shape[0]
    cdef Py_ssize_t ell, i, j, k
    cdef double s
    for i in range(M):
        means[0, i] = m1[i]
    _tril_square(C11, covs[0])
    for ell in range(1, L):
        for i in range(M):
            s = b[ell - 1, i]
            for k in range(M):
                s += A[ell - 1, i, k] * means[ell - 1, k]
            means[ell, i] = s
        # work = A_{ell-1} covs_{ell-1}
        for i in range(M):
            for j in range(M):
                s = 0.0
                for k in range(M):
                    s += A[ell - 1, i, k] * covs[ell - 1, k, j]
                work[i, j] = s
        _tril_square(C[ell - 1], covs[ell])
        for i in range(M):
            for j in range(M):
                s = 0.0
                for k in range(M):
                    s += work[i, k] * A[ell - 1, j, k]
                covs[ell, i, j] += s


cdef void _jg_kls(cnp.int64_t[::1] fams_, double[::1] var_, double[::1] gam_,
                  double[::1] per_, cnp.int64_t[::1] meanv_, double[:, ::1] z_,
                  double[:, :] C11, double[:, :, ::1] C, double[:, ::1] means,
                  double[:, :, ::1] covs, double[:, ::1] K, double[:, ::1] Lz,
                  double[:, ::1] V, double[::1] col, double[::1] tmp,
                  double[::1] sched, double[::1] kls):
    """Chain-form KL terms; term ell pairs prior ell with q's conditional."""
    cdef Py_ssize_t L = means.shape[0]
    cdef Py_ssize_t M = means.shape[1]
    cdef Py_ssize_t ell, i, j
    cdef double tr, quad, logdet_p, logdet_qc, muz_i
    for ell in range(L):
        if _prior_chol(fams_[ell], var_[ell], gam_[ell], per_[ell], z_, ell,
                       K, Lz, sched) < 0.0:
            raise _not_psd(var_[ell])
        # V = Lz^{-1} covs[ell], column by column
        for j in range(M):
            for i in range(M):
                col[i] = covs[ell, i, j]
            _fwd(Lz, col, tmp)
            for i in range(M):
                V[i, j] = tmp[i]
        # tr(Lz^{-1} V^T): component j of each solved column V^T e_j
        tr = 0.0
        for j in range(M):
            for i in range(M):
                col[i] = V[j, i]
            _fwd(Lz, col, tmp)
            tr += tmp[j]
        quad = 0.0
        for i in range(M):
            muz_i = mean1(meanv_[ell], z_[ell, i])
            col[i] = means[ell, i] - muz_i
        _fwd(Lz, col, tmp)
        for i in range(M):
            quad += tmp[i] * tmp[i]
        logdet_p = 0.0
        logdet_qc = 0.0
        for i in range(M):
            logdet_p += log(Lz[i, i])
            if ell == 0:
                logdet_qc += log(fabs(C11[i, i]))
            else:
                logdet_qc += log(fabs(C[ell - 1, i, i]))
        kls[ell] = 0.5 * (tr + quad - M) + logdet_p - logdet_qc


def jg_elbo_analytic(fams, var, gam, per, meanv, z, m1, C11, A, b, C, x, y,
                     double sigma2, eps):
    cdef cnp.int64_t[::1] fams_ = np.ascontiguousarray(fams, dtype=np.int64)
    cdef double[::1] var_ = np.ascontiguousarray(var, dtype=np.float64)
    cdef double[::1] gam_ = np.ascontiguousarray(gam, dtype=np.float64)
    cdef double[::1] per_ = np.ascontiguousarray(per, dtype=np.float64)
    cdef cnp.int64_t[::1] meanv_ = np.ascontiguousarray(meanv, dtype=np.int64)
    cdef double[:, ::1] z_ = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[::1] m1_ = np.ascontiguousarray(m1, dtype=np.float64)
    cdef double[:, ::1] C11_ = np.ascontiguousarray(C11, dtype=np.float64)
    cdef double[:, :, ::1] A_ = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] b_ = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, :, ::1] C_ = np.ascontiguousarray(C, dtype=np.float64)
    cdef double[::1] x_ = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[:, :, ::1] eps_ = np.ascontiguousarray(eps, dtype=np.float64)

    cdef Py_ssize_t S = eps_.shape[0], L = eps_.shape[1], N = eps_.shape[2]
    cdef Py_ssize_t M = z_.shape[1]
    cdef Py_ssize_t rank = 0
    cdef Py_ssize_t ell, i, j, k, n, sidx, r

    draws_arr = np.empty((L, S, N))
    kls_arr = np.empty(L)
    e_rows_arr = np.empty(S)
    cdef double[:, :, ::1] draws = draws_arr
    cdef double[::1] kls = kls_arr
    cdef double[::1] e_rows = e_rows_arr

    means_arr = np.empty((L, M)); covs_arr = np.empty((L, M, M))
    cdef double[:, ::1] means = means_arr
    cdef double[:, :, ::1] covs = covs_arr
    Kb = np.empty((M, M)); Lzb = np.empty((M, M)); Vb = np.empty((M, M))
    cdef double[:, ::1] K = Kb, Lz = Lzb, V = Vb
    scratch = np.empty((9, M))
    cdef double[::1] mu_z = scratch[0], kvec = scratch[1], tmp = scratch[2]
    cdef double[::1] a = scratch[3], Sa = scratch[4], g = scratch[5]
    cdef double[::1] col = scratch[6], hrow = scratch[7], wrow = scratch[8]
    cdef double[::1] Wa = np.empty(max(L - 1, 1))
    cdef double[::1] sched = np.empty(4)

    h_arr = np.empty((S, N, M)) if L > 1 else np.empty((1, 1, 1))
    W_arr = np.zeros((S, N, M, max(L - 1, 1))) if L > 1 else np.zeros((1, 1, 1, 1))
    cdef double[:, :, ::1] h = h_arr
    cdef double[:, :, :, ::1] W = W_arr

    _chain_moments(m1_, C11_, A_, b_, C_, means, covs, K)

    cdef double t, mu, base, quad, s2, sd, den, resid, f, s
    for ell in range(L):
        if _prior_chol(fams_[ell], var_[ell], gam_[ell], per_[ell], z_, ell,
                       K, Lz, sched) < 0.0:
            raise _not_psd(var_[ell])
        for i in range(M):
            mu_z[i] = mean1(meanv_[ell], z_[ell, i])
        if ell == 0:
            for n in range(N):
                t = x_[n]
                for i in range(M):
                    kvec[i] = kern1(fams_[0], var_[0], gam_[0], per_[0],
                                    z_[0, i] - t)
                _alpha(Lz, kvec, tmp, a)
                mu = mean1(meanv_[0], t)
                base = var_[0]
                for i in range(M):
                    mu += a[i] * (means[0, i] - mu_z[i])
                    base -= kvec[i] * a[i]
                quad = 0.0
                for i in range(M):
                    s = 0.0
                    for j in range(M):
                        s += covs[0, i, j] * a[j]
                    g[i] = s
                    quad += a[i] * s
                s2 = base + quad
                sd = sqrt(s2) if s2 > 0.0 else 0.0
                for sidx in range(S):
                    f = mu + sd * eps_[sidx, 0, n]
                    draws[0, sidx, n] = f
                    if L > 1:
                        den = s2 if s2 > 1e-300 else 1e-300
                        resid = (f - mu) / den if s2 > 0.0 else 0.0
                        for i in range(M):
                            h[sidx, n, i] = means[0, i] + resid * g[i]
                            if sd > 0.0:
                                den = sd if sd > 1e-300 else 1e-300
                                W[sidx, n, i, 0] = g[i] / den
                            else:
                                W[sidx, n, i, 0] = 0.0
            if L > 1:
                # advance to layer 2's conditional moments
                for sidx in range(S):
                    for n in range(N):
                        for i in range(M):
                            s = b_[0, i]
                            for k in range(M):
                                s += A_[0, i, k] * h[sidx, n, k]
                            hrow[i] = s
                        for i in range(M):
                            h[sidx, n, i] = hrow[i]
                        for i in range(M):
                            s = 0.0
                            for k in range(M):
                                s += A_[0, i, k] * W[sidx, n, k, 0]
                            wrow[i] = s
                        for i in range(M):
                            W[sidx, n, i, 0] = wrow[i]
                rank = 1
        else:
            for sidx in range(S):
                for n in range(N):
                    t = draws[ell - 1, sidx, n]
                    for i in range(M):
                        kvec[i] = kern1(fams_[ell], var_[ell], gam_[ell],
                                        per_[ell], z_[ell, i] - t)
                    _alpha(Lz, kvec, tmp, a)
                    mu = mean1(meanv_[ell], t)
                    base = var_[ell]
                    for i in range(M):
                        mu += a[i] * (h[sidx, n, i] - mu_z[i])
                        base -= kvec[i] * a[i]
                    quad = 0.0
                    for i in range(M):
                        s = 0.0
                        for j in range(M):
                            s += covs[ell, i, j] * a[j]
                        Sa[i] = s
                        quad += a[i] * s
                    s2 = base + quad
                    for r in range(rank):
                        s = 0.0
                        for i in range(M):
                            s += a[i] * W[sidx, n, i, r]
                        Wa[r] = s
                        s2 -= s * s
                    sd = sqrt(s2) if s2 > 0.0 else 0.0
                    f = mu + sd * eps_[sidx, ell, n]
                    draws[ell, sidx, n] = f
                    if ell + 1 < L:
                        for i in range(M):
                            s = Sa[i]
                            for r in range(rank):
                                s -= W[sidx, n, i, r] * Wa[r]
                            g[i] = s
                        den = s2 if s2 > 1e-300 else 1e-300
                        resid = (f - mu) / den if s2 > 0.0 else 0.0
                        for i in range(M):
                            h[sidx, n, i] += resid * g[i]
                            if sd > 0.0:
                                den = sd if sd > 1e-300 else 1e-300
                                W[sidx, n, i, rank] = g[i] / den
                            else:
                                W[sidx, n, i, rank] = 0.0
                        for i in range(M):
                            s = b_[ell, i]
                            for k in range(M):
                                s += A_[ell, i, k] * h[sidx, n, k]
                            hrow[i] = s
                        for i in range(M):
                            h[sidx, n, i] = hrow[i]
                        for r in range(rank + 1):
                            for i in range(M):
                                s = 0.0
                                for k in range(M):
                                    s += A_[ell, i, k] * W[sidx, n, k, r]
                                wrow[i] = s
                            for i in range(M):
                                W[sidx, n, i, r] = wrow[i]
            if ell + 1 < L:
                rank += 1

    cdef double[:, ::1] fL = draws_arr[L - 1]
    for sidx in range(S):
        e_rows[sidx] = _loglik_row(y_, fL, sidx, sigma2)
    _jg_kls(fams_, var_, gam_, per_, meanv_, z_, C11_, C_, means, covs,
            K, Lz, V, col, tmp, sched, kls)
    return e_rows_arr, kls_arr


def jg_elbo_sampled(fams, var, gam, per, meanv, z, m1, C11, A, b, C, x, y,
                    double sigma2, u_eps, f_eps):
    cdef cnp.int64_t[::1] fams_ = np.ascontiguousarray(fams, dtype=np.int64)
    cdef double[::1] var_ = np.ascontiguousarray(var, dtype=np.float64)
    cdef double[::1] gam_ = np.ascontiguousarray(gam, dtype=np.float64)
    cdef double[::1] per_ = np.ascontiguousarray(per, dtype=np.float64)
    cdef cnp.int64_t[::1] meanv_ = np.ascontiguousarray(meanv, dtype=np.int64)
    cdef double[:, ::1] z_ = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[::1] m1_ = np.ascontiguousarray(m1, dtype=np.float64)
    cdef double[:, ::1] C11_ = np.ascontiguousarray(C11, dtype=np.float64)
    cdef double[:, :, ::1] A_ = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] b_ = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, :, ::1] C_ = np.ascontiguousarray(C, dtype=np.float64)
    cdef double[::1] x_ = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[:, :, ::1] u_eps_ = np.ascontiguousarray(u_eps, dtype=np.float64)
    cdef double[:, :, :, ::1] f_eps_ = np.ascontiguousarray(f_eps, dtype=np.float64)

    cdef Py_ssize_t So = f_eps_.shape[0], Si = f_eps_.shape[1]
    cdef Py_ssize_t L = f_eps_.shape[2], N = f_eps_.shape[3]
    cdef Py_ssize_t M = z_.shape[1]
    cdef Py_ssize_t ell, i, j, k, n, so, si

    kls_arr = np.empty(L)
    e_rows_arr = np.empty(So)
    cdef double[::1] kls = kls_arr
    cdef double[::1] e_rows = e_rows_arr

    u_arr = np.empty((So, L, M))
    cdef double[:, :, ::1] u = u_arr
    means_arr = np.empty((L, M)); covs_arr = np.empty((L, M, M))
    cdef double[:, ::1] means = means_arr
    cdef double[:, :, ::1] covs = covs_arr
    Kb = np.empty((M, M)); Lzb = np.empty((M, M)); Vb = np.empty((M, M))
    cdef double[:, ::1] K = Kb, Lz = Lzb, V = Vb
    scratch = np.empty((6, M))
    cdef double[::1] mu_z = scratch[0], kvec = scratch[1], tmp = scratch[2]
    cdef double[::1] a = scratch[3], col = scratch[4], urow = scratch[5]
    cdef double[::1] sched = np.empty(4)
    draws_arr = np.empty((L, So, Si, N))
    cdef double[:, :, :, ::1] draws = draws_arr
    mu_so_arr = np.empty(So)
    cdef double[::1] mu_so = mu_so_arr

    # ancestral draws from the chain
    cdef double s
    for so in range(So):
        for i in range(M):
            s = m1_[i]
            for k in range(i + 1):
                s += C11_[i, k] * u_eps_[so, 0, k]
            u[so, 0, i] = s
        for ell in range(1, L):
            for i in range(M):
                s = b_[ell - 1, i]
                for k in range(M):
                    s += A_[ell - 1, i, k] * u[so, ell - 1, k]
                for k in range(i + 1):
                    s += C_[ell - 1, i, k] * u_eps_[so, ell, k]
                urow[i] = s
            for i in range(M):
                u[so, ell, i] = urow[i]

    cdef double t, mu, base, s2, sd, f
    for ell in range(L):
        if _prior_chol(fams_[ell], var_[ell], gam_[ell], per_[ell], z_, ell,
                       K, Lz, sched) < 0.0:
            raise _not_psd(var_[ell])
        for i in range(M):
            mu_z[i] = mean1(meanv_[ell], z_[ell, i])
        if ell == 0:
            for n in range(N):
                t = x_[n]
                for i in range(M):
                    kvec[i] = kern1(fams_[0], var_[0], gam_[0], per_[0],
                                    z_[0, i] - t)
                _alpha(Lz, kvec, tmp, a)
                base = var_[0]
                for i in range(M):
                    base -= kvec[i] * a[i]
                sd = sqrt(base) if base > 0.0 else 0.0
                for so in range(So):
                    mu = mean1(meanv_[0], t)
                    for i in range(M):
                        mu += (u[so, 0, i] - mu_z[i]) * a[i]
                    mu_so[so] = mu
                for so in range(So):
                    for si in range(Si):
                        draws[0, so, si, n] = mu_so[so] + sd * f_eps_[so, si, 0, n]
        else:
            for so in range(So):
                for si in range(Si):
                    for n in range(N):
                        t = draws[ell - 1, so, si, n]
                        for i in range(M):
                            kvec[i] = kern1(fams_[ell], var_[ell], gam_[ell],
                                            per_[ell], z_[ell, i] - t)
                        _alpha(Lz, kvec, tmp, a)
                        mu = mean1(meanv_[ell], t)
                        base = var_[ell]
                        for i in range(M):
                            mu += (u[so, ell, i] - mu_z[i]) * a[i]
                            base -= kvec[i] * a[i]
                        sd = sqrt(base) if base > 0.0 else 0.0
                        draws[ell, so, si, n] = mu + sd * f_eps_[so, si, ell, n]

    cdef double acc, r
    cdef double c0 = -0.5 * (LOG2PI + log(sigma2))
    for so in range(So):
        acc = 0.0
        for si in range(Si):
            for n in range(N):
                r = y_[n] - draws[L - 1, so, si, n]
                acc += c0 - r * r / (2.0 * sigma2)
        e_rows[so] = acc / Si

    _chain_moments(m1_, C11_, A_, b_, C_, means, covs, K)
    _jg_kls(fams_, var_, gam_, per_, meanv_, z_, C11_, C_, means, covs,
            K, Lz, V, col, tmp, sched, kls)
    return e_rows_arr, kls_arr


# ---------------------------------------------------------------------------
# chained-inducing scheme
# ---------------------------------------------------------------------------


cdef double _cond_chol6(double[:, ::1] Kc, double var, double[:, ::1] out,
                        double[::1] sched) except? -2.0:
    """Six-step scheduled Cholesky with the oversized last-resort jitter.

    Returns the recorded jitter (1e6*var for the last resort, matching the
    NumPy backend's bookkeeping even though more is added to the matrix).
    """
    cdef Py_ssize_t M = Kc.shape[0]
    cdef Py_ssize_t i, j
    sched[0] = 0.0
    sched[1] = 1e-10 * var
    sched[2] = 1e-8 * var
    sched[3] = 1e-6 * var
    sched[4] = 1e-4 * var
    sched[5] = 1e-2 * var
    cdef double jit = _chol_schedule(Kc, out, sched, 6)
    if jit >= 0.0:
        return jit
    for i in range(M):
        for j in range(M):
            out[i, j] = Kc[i, j]
        out[i, i] += 1e-2 * var + 1e6 * var
    if _chol_lower(out) != 0:
        raise np.linalg.LinAlgError("conditioning kernel matrix not PSD")
    return 1e6 * var


def chained_elbo(fams, var, gam, per, meanv, z, m, C, x, y, double sigma2,
                 fz_eps, retry_eps, f_eps, double retry_factor=1e-4):
    cdef cnp.int64_t[::1] fams_ = np.ascontiguousarray(fams, dtype=np.int64)
    cdef double[::1] var_ = np.ascontiguousarray(var, dtype=np.float64)
    cdef double[::1] gam_ = np.ascontiguousarray(gam, dtype=np.float64)
    cdef double[::1] per_ = np.ascontiguousarray(per, dtype=np.float64)
    cdef cnp.int64_t[::1] meanv_ = np.ascontiguousarray(meanv, dtype=np.int64)
    cdef double[::1] z_ = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, ::1] m_ = np.ascontiguousarray(m, dtype=np.float64)
    cdef double[:, :, ::1] C_ = np.ascontiguousarray(C, dtype=np.float64)
    cdef double[::1] x_ = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[:, :, ::1] fz_eps_ = np.ascontiguousarray(fz_eps, dtype=np.float64)
    cdef double[:, :, ::1] retry_eps_ = np.ascontiguousarray(retry_eps, dtype=np.float64)
    cdef double[:, :, ::1] f_eps_ = np.ascontiguousarray(f_eps, dtype=np.float64)

    cdef Py_ssize_t S = f_eps_.shape[0], L = f_eps_.shape[1], N = f_eps_.shape[2]
    cdef Py_ssize_t M = z_.shape[0]
    cdef Py_ssize_t ell, i, j, k, n, sidx
    cdef long n_chol = 0, n_cond = 0, n_retry = 0

    kls_arr = np.zeros(L)
    e_rows_arr = np.empty(S)
    cdef double[::1] kls = kls_arr
    cdef double[::1] e_rows = e_rows_arr

    fz_arr = np.empty((S, L, M))
    cdef double[:, :, ::1] fz = fz_arr
    for sidx in range(S):
        for ell in range(L):
            for i in range(M):
                fz[sidx, ell, i] = m_[ell, i]
                for k in range(i + 1):
                    fz[sidx, ell, i] += C_[ell, i, k] * fz_eps_[sidx, ell, k]

    Kb = np.empty((M, M))
    chols_arr = np.empty((S, M, M))
    jits_arr = np.empty(S)
    cdef double[:, ::1] Kc = Kb
    cdef double[:, :, ::1] chols = chols_arr
    cdef double[::1] jits = jits_arr
    scratch = np.empty((6, M))
    cdef double[::1] kvec = scratch[0], tmp = scratch[1], a = scratch[2]
    cdef double[::1] col = scratch[3], loc_mean0 = scratch[4], sol = scratch[5]
    cdef double[::1] sched = np.empty(6)
    prev_arr = np.empty((S, N))
    cdef double[:, ::1] prev = prev_arr
    cdef double[:, ::1] dvals = np.empty((S, M))
    cdef double[:, ::1] loc_mean = np.empty((S, M))

    cdef double t, mu, base, s2, sd, jit, kl_acc, kl_s, fro, quad
    cdef double logdet_p, logdet_q, s
    for ell in range(L):
        if ell == 0:
            for i in range(M):
                for j in range(M):
                    Kc[i, j] = kern1(fams_[0], var_[0], gam_[0], per_[0],
                                     z_[i] - z_[j])
            _cond_chol6(Kc, var_[0], chols[0], sched)
            n_chol += 1
            for i in range(M):
                loc_mean0[i] = mean1(meanv_[0], z_[i])
            kls[0] = _kl_chol(m_[0], C_[0], loc_mean0, chols[0], col, sol)
            for sidx in range(S):
                for i in range(M):
                    dvals[sidx, i] = fz[sidx, 0, i] - loc_mean0[i]
            for n in range(N):
                t = x_[n]
                for i in range(M):
                    kvec[i] = kern1(fams_[0], var_[0], gam_[0], per_[0],
                                    z_[i] - t)
                _alpha(chols[0], kvec, tmp, a)
                mu = mean1(meanv_[0], t)
                base = var_[0]
                for i in range(M):
                    base -= kvec[i] * a[i]
                sd = sqrt(base) if base > 0.0 else 0.0
                for sidx in range(S):
                    s = mu
                    for i in range(M):
                        s += dvals[sidx, i] * a[i]
                    prev[sidx, n] = s + sd * f_eps_[sidx, 0, n]
            n_cond += S * N
        else:
            # conditioning locations are the previous layer's f^z draws;
            # resample once if a sample needs excessive jitter
            for sidx in range(S):
                for i in range(M):
                    for j in range(M):
                        Kc[i, j] = kern1(fams_[ell], var_[ell], gam_[ell],
                                         per_[ell],
                                         fz[sidx, ell - 1, i] - fz[sidx, ell - 1, j])
                jits[sidx] = _cond_chol6(Kc, var_[ell], chols[sidx], sched)
            n_chol += S
            for sidx in range(S):
                if jits[sidx] > retry_factor * var_[ell]:
                    n_retry += 1
                    for i in range(M):
                        fz[sidx, ell - 1, i] = m_[ell - 1, i]
                        for k in range(i + 1):
                            fz[sidx, ell - 1, i] += (
                                C_[ell - 1, i, k] * retry_eps_[sidx, ell - 1, k]
                            )
                    for i in range(M):
                        for j in range(M):
                            Kc[i, j] = kern1(
                                fams_[ell], var_[ell], gam_[ell], per_[ell],
                                fz[sidx, ell - 1, i] - fz[sidx, ell - 1, j])
                    _cond_chol6(Kc, var_[ell], chols[sidx], sched)
                    n_chol += 1
            for sidx in range(S):
                for i in range(M):
                    loc_mean[sidx, i] = mean1(meanv_[ell], fz[sidx, ell - 1, i])
                    dvals[sidx, i] = fz[sidx, ell, i] - loc_mean[sidx, i]
            # per-sample KL at the sampled conditioning locations
            logdet_q = 0.0
            for i in range(M):
                logdet_q += log(fabs(C_[ell, i, i]))
            kl_acc = 0.0
            for sidx in range(S):
                fro = 0.0
                for j in range(M):
                    for i in range(M):
                        col[i] = C_[ell, i, j] if i >= j else 0.0
                    _fwd(chols[sidx], col, tmp)
                    for i in range(M):
                        fro += tmp[i] * tmp[i]
                for i in range(M):
                    col[i] = m_[ell, i] - loc_mean[sidx, i]
                _fwd(chols[sidx], col, tmp)
                quad = 0.0
                logdet_p = 0.0
                for i in range(M):
                    quad += tmp[i] * tmp[i]
                    logdet_p += log(chols[sidx, i, i])
                kl_s = 0.5 * (fro + quad - M) + logdet_p - logdet_q
                if kl_s > 0.0:
                    kl_acc += kl_s
            kls[ell] = kl_acc / S
            # propagate the data points through the layer
            for sidx in range(S):
                for n in range(N):
                    t = prev[sidx, n]
                    for i in range(M):
                        kvec[i] = kern1(fams_[ell], var_[ell], gam_[ell],
                                        per_[ell], fz[sidx, ell - 1, i] - t)
                    _alpha(chols[sidx], kvec, tmp, a)
                    mu = mean1(meanv_[ell], t)
                    base = var_[ell]
                    for i in range(M):
                        mu += dvals[sidx, i] * a[i]
                        base -= kvec[i] * a[i]
                    sd = sqrt(base) if base > 0.0 else 0.0
                    prev[sidx, n] = mu + sd * f_eps_[sidx, ell, n]
            n_cond += S * N

    for sidx in range(S):
        e_rows[sidx] = _loglik_row(y_, prev, sidx, sigma2)
    return e_rows_arr, kls_arr, n_chol, n_cond, n_retry

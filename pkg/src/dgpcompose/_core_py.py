"""NumPy implementations of the hot evaluation paths.

All functions here are pure: plain float64 arrays in, arrays out, no RNG.
Base noise is always drawn by the caller so that an evaluation is a
deterministic function of (parameters, noise). The compiled backend in
_core_cy mirrors the four *_elbo entry points exactly.
"""

import math

import numpy as np

LOG2PI = math.log(2.0 * math.pi)

# family codes
FAM_SE = 0
FAM_PERIODIC = 1

# mean-function codes
MEAN_ZERO = 0
MEAN_IDENTITY = 1


def kern_cross(fam, var, gam, per, x, t):
    """Kernel matrix k(x_i, t_j) for one layer, shapes (len(x), len(t))."""
    diff = x[:, None] - t[None, :]
    if fam == FAM_SE:
        return var * np.exp(diff**2 / (-2.0 * gam * gam))
    s = np.sin(np.pi * np.abs(diff) / per)
    return var * np.exp(-2.0 * s * s / (gam * gam))


def mean_apply(code, t):
    if code == MEAN_IDENTITY:
        return t
    return np.zeros_like(t)


def _chol_with_schedule(K, schedule):
    """Cholesky with a jitter schedule; returns (L, jitter) or (None, last)."""
    eye = np.eye(K.shape[0])
    jit = 0.0
    for jit in schedule:
        try:
            return np.linalg.cholesky(K + jit * eye), jit
        except np.linalg.LinAlgError:
            continue
    return None, jit


def _tri_solve(L, B):
    """Forward substitution L^-1 B for lower-triangular L (small systems)."""
    return np.linalg.solve(L, B)


def _cho_solve(L, B):
    """K^-1 B given the lower Cholesky factor of K."""
    return np.linalg.solve(L.T, np.linalg.solve(L, B))


def _kl_gauss_chol(m_q, Lq, m_p, Lp):
    """KL(N(m_q, Lq Lq^T) || N(m_p, Lp Lp^T)) from Cholesky factors."""
    M = _tri_solve(Lp, Lq)
    w = _tri_solve(Lp, m_q - m_p)
    k = m_q.shape[0]
    logdet = np.sum(np.log(np.diag(Lp))) - np.sum(np.log(np.abs(np.diag(Lq))))
    return max(0.5 * (np.sum(M * M) + w @ w - k) + logdet, 0.0)


def _layer_prior(fam, var, gam, per, meanv, z, jitter_schedule=None):
    """Cholesky of K(z, z) (with minimal scheduled jitter) and mu(z)."""
    K = kern_cross(fam, var, gam, per, z, z)
    if jitter_schedule is None:
        jitter_schedule = [0.0, 1e-10 * var, 1e-8 * var, 1e-6 * var]
    L, jit = _chol_with_schedule(K, jitter_schedule)
    if L is None:
        raise np.linalg.LinAlgError(
            f"inducing kernel matrix not PSD within jitter schedule (last {jit:g})"
        )
    return L, mean_apply(meanv, z)


def _loglik_rows(y, fL, sigma2):
    """Row sums of log N(y_j | fL[s, j], sigma2); fL has shape (S, N)."""
    return np.sum(-0.5 * (LOG2PI + math.log(sigma2)) - (y - fL) ** 2 / (2.0 * sigma2), axis=1)


# ---------------------------------------------------------------------------
# mean-field scheme
# ---------------------------------------------------------------------------


def mf_propagate(fams, var, gam, per, meanv, z, m, C, x, eps):
    """Sequential per-point draws through the layers under factorised q.

    eps has shape (S, L, N); returns draws of every layer, shape (L, S, N).
    """
    S, L, N = eps.shape
    draws = np.empty((L, S, N))
    prev = None  # None marks the shared first-layer input x
    for ell in range(L):
        Lz, mu_z = _layer_prior(
            fams[ell], var[ell], gam[ell], per[ell], meanv[ell], z[ell]
        )
        Sm = C[ell] @ C[ell].T
        d = m[ell] - mu_z
        if prev is None:
            t = x
        else:
            t = prev.reshape(-1)
        Kzt = kern_cross(fams[ell], var[ell], gam[ell], per[ell], z[ell], t)
        a = _cho_solve(Lz, Kzt)
        mu = mean_apply(meanv[ell], t) + a.T @ d
        s2 = var[ell] - np.sum(Kzt * a, axis=0) + np.sum(a * (Sm @ a), axis=0)
        sd = np.sqrt(np.maximum(s2, 0.0))
        if prev is None:
            f = mu[None, :] + sd[None, :] * eps[:, ell, :]
        else:
            f = (mu + sd * eps[:, ell, :].reshape(-1)).reshape(S, N)
        draws[ell] = f
        prev = f
    return draws


def mf_kl_terms(fams, var, gam, per, meanv, z, m, C):
    L = m.shape[0]
    kls = np.empty(L)
    for ell in range(L):
        Lz, mu_z = _layer_prior(
            fams[ell], var[ell], gam[ell], per[ell], meanv[ell], z[ell]
        )
        kls[ell] = _kl_gauss_chol(m[ell], np.tril(C[ell]), mu_z, Lz)
    return kls


def mf_elbo(fams, var, gam, per, meanv, z, m, C, x, y, sigma2, eps):
    draws = mf_propagate(fams, var, gam, per, meanv, z, m, C, x, eps)
    e_rows = _loglik_rows(y, draws[-1], sigma2)
    kls = mf_kl_terms(fams, var, gam, per, meanv, z, m, C)
    return e_rows, kls


# ---------------------------------------------------------------------------
# jointly-Gaussian scheme (chain parametrisation)
# ---------------------------------------------------------------------------


def chain_marginals(m1, C11, A, b, C):
    """Marginal means and covariances implied by the chain parameters.

    Returns (means (L, M), covs (L, M, M), cross (L-1, M, M)) where
    cross[l] = cov(u_{l+2}, u_{l+1}).
    """
    L = A.shape[0] + 1
    M = m1.shape[0]
    means = np.empty((L, M))
    covs = np.empty((L, M, M))
    cross = np.empty((max(L - 1, 0), M, M))
    means[0] = m1
    covs[0] = C11 @ C11.T
    for ell in range(1, L):
        Al = A[ell - 1]
        cross[ell - 1] = Al @ covs[ell - 1]
        means[ell] = Al @ means[ell - 1] + b[ell - 1]
        covs[ell] = cross[ell - 1] @ Al.T + C[ell - 1] @ C[ell - 1].T
    return means, covs, cross


def jg_kl_terms(fams, var, gam, per, meanv, z, m1, C11, A, b, C):
    """Chain-form KL(q(u_1..u_L) || prod_l p(u_l)), one term per layer.

    Sums to the dense joint KL exactly; no LM x LM factorisation is formed.
    Term l pairs the prior factor for layer l with the conditional
    determinant of q's chain factor.
    """
    means, covs, _ = chain_marginals(m1, C11, A, b, C)
    L = means.shape[0]
    M = m1.shape[0]
    kls = np.empty(L)
    for ell in range(L):
        Lz, mu_z = _layer_prior(
            fams[ell], var[ell], gam[ell], per[ell], meanv[ell], z[ell]
        )
        Cl = np.tril(C11) if ell == 0 else np.tril(C[ell - 1])
        d = means[ell] - mu_z
        V = _tri_solve(Lz, covs[ell])
        tr = np.trace(_tri_solve(Lz, V.T))
        w = _tri_solve(Lz, d)
        logdet_p = np.sum(np.log(np.diag(Lz)))
        logdet_qc = np.sum(np.log(np.abs(np.diag(Cl))))
        kls[ell] = 0.5 * (tr + w @ w - M) + logdet_p - logdet_qc
    return kls


def jg_propagate(fams, var, gam, per, meanv, z, m1, C11, A, b, C, x, eps):
    """Per-point draws with the inducing points analytically integrated out.

    Carries, for every sampled trajectory point, the conditional moments of
    the current layer's inducing values given the f values observed so far:
    mean h (S, N, M) and covariance S_ll - W W^T in factored form
    (W has one column per previous layer). eps has shape (S, L, N).
    """
    S, L, N = eps.shape
    means, covs, cross = chain_marginals(m1, C11, A, b, C)
    draws = np.empty((L, S, N))

    h = None  # (S, N, M) conditional mean of u_ell; None until first update
    W = None  # (S, N, M, r) low-rank downdate factor of its covariance
    prev = None
    for ell in range(L):
        Lz, mu_z = _layer_prior(
            fams[ell], var[ell], gam[ell], per[ell], meanv[ell], z[ell]
        )
        Sll = covs[ell]
        if prev is None:
            # first layer: all samples share the input grid
            Kzt = kern_cross(fams[ell], var[ell], gam[ell], per[ell], z[ell], x)
            a = _cho_solve(Lz, Kzt)  # (M, N)
            mu = mean_apply(meanv[ell], x) + a.T @ (means[0] - mu_z)
            base = var[ell] - np.sum(Kzt * a, axis=0)
            s2 = base + np.sum(a * (Sll @ a), axis=0)
            sd = np.sqrt(np.maximum(s2, 0.0))
            f = mu[None, :] + sd[None, :] * eps[:, 0, :]
            draws[0] = f
            if L > 1:
                g = Sll @ a  # (M, N)
                resid = np.where(s2 > 0.0, (f - mu) / np.maximum(s2, 1e-300), 0.0)
                h = means[0][None, None, :] + resid[:, :, None] * g.T[None, :, :]
                Wcol = np.where(sd > 0.0, g / np.maximum(sd, 1e-300), 0.0)  # (M, N)
                W = np.broadcast_to(
                    Wcol.T[None, :, :, None], (S, N, a.shape[0], 1)
                ).copy()
                # advance to layer 2's conditional moments
                h = np.einsum("ij,snj->sni", A[0], h) + b[0]
                W = np.einsum("ij,snjr->snir", A[0], W)
        else:
            t = prev.reshape(-1)
            Kzt = kern_cross(fams[ell], var[ell], gam[ell], per[ell], z[ell], t)
            a_flat = _cho_solve(Lz, Kzt)
            a = a_flat.reshape(-1, S, N)  # (M, S, N)
            mu = mean_apply(meanv[ell], prev) + np.einsum("msn,snm->sn", a, h - mu_z)
            base = var[ell] - np.sum(Kzt * a_flat, axis=0).reshape(S, N)
            Sa = np.einsum("ij,jsn->isn", Sll, a)
            Wa = np.einsum("msn,snmr->snr", a, W)
            s2 = base + np.einsum("msn,msn->sn", a, Sa) - np.sum(Wa**2, axis=2)
            sd = np.sqrt(np.maximum(s2, 0.0))
            f = mu + sd * eps[:, ell, :]
            draws[ell] = f
            if ell + 1 < L:
                g = np.einsum("isn->sni", Sa) - np.einsum("snmr,snr->snm", W, Wa)
                resid = np.where(s2 > 0.0, (f - mu) / np.maximum(s2, 1e-300), 0.0)
                h = h + resid[:, :, None] * g
                gcol = np.where(
                    sd[:, :, None] > 0.0, g / np.maximum(sd[:, :, None], 1e-300), 0.0
                )
                W = np.concatenate([W, gcol[:, :, :, None]], axis=3)
                h = np.einsum("ij,snj->sni", A[ell], h) + b[ell]
                W = np.einsum("ij,snjr->snir", A[ell], W)
        prev = draws[ell]
    return draws


def jg_elbo_analytic(fams, var, gam, per, meanv, z, m1, C11, A, b, C, x, y, sigma2, eps):
    draws = jg_propagate(fams, var, gam, per, meanv, z, m1, C11, A, b, C, x, eps)
    e_rows = _loglik_rows(y, draws[-1], sigma2)
    kls = jg_kl_terms(fams, var, gam, per, meanv, z, m1, C11, A, b, C)
    return e_rows, kls


def jg_sample_u(m1, C11, A, b, C, u_eps):
    """Ancestral draws from the chain, u_eps (S, L, M) -> u (S, L, M)."""
    S, L, M = u_eps.shape
    u = np.empty((S, L, M))
    u[:, 0, :] = m1 + u_eps[:, 0, :] @ np.tril(C11).T
    for ell in range(1, L):
        u[:, ell, :] = (
            u[:, ell - 1, :] @ A[ell - 1].T + b[ell - 1] + u_eps[:, ell, :] @ np.tril(C[ell - 1]).T
        )
    return u


def jg_propagate_given_u(fams, var, gam, per, meanv, z, u, x, f_eps):
    """Recursive per-point draws through exact conditionals given inducing values.

    u has shape (So, L, M); f_eps has shape (So, Si, L, N). Returns draws of
    shape (L, So, Si, N).
    """
    So, Si, L, N = f_eps.shape
    draws = np.empty((L, So, Si, N))
    prev = None
    for ell in range(L):
        Lz, mu_z = _layer_prior(
            fams[ell], var[ell], gam[ell], per[ell], meanv[ell], z[ell]
        )
        du = u[:, ell, :] - mu_z  # (So, M)
        if prev is None:
            Kzt = kern_cross(fams[ell], var[ell], gam[ell], per[ell], z[ell], x)
            a = _cho_solve(Lz, Kzt)  # (M, N)
            mu = mean_apply(meanv[ell], x)[None, :] + du @ a  # (So, N)
            s2 = var[ell] - np.sum(Kzt * a, axis=0)  # (N,)
            sd = np.sqrt(np.maximum(s2, 0.0))
            f = mu[:, None, :] + sd[None, None, :] * f_eps[:, :, ell, :]
        else:
            t = prev.reshape(-1)
            Kzt = kern_cross(fams[ell], var[ell], gam[ell], per[ell], z[ell], t)
            a = _cho_solve(Lz, Kzt)
            s2 = (var[ell] - np.sum(Kzt * a, axis=0)).reshape(So, Si, N)
            a = a.reshape(-1, So, Si, N)
            mu = mean_apply(meanv[ell], prev) + np.einsum("msin,sm->sin", a, du)
            sd = np.sqrt(np.maximum(s2, 0.0))
            f = mu + sd * f_eps[:, :, ell, :]
        draws[ell] = f
        prev = f
    return draws


def jg_elbo_sampled(
    fams, var, gam, per, meanv, z, m1, C11, A, b, C, x, y, sigma2, u_eps, f_eps
):
    u = jg_sample_u(m1, C11, A, b, C, u_eps)
    draws = jg_propagate_given_u(fams, var, gam, per, meanv, z, u, x, f_eps)
    So, Si = f_eps.shape[0], f_eps.shape[1]
    fL = draws[-1].reshape(So * Si, -1)
    e_rows = _loglik_rows(y, fL, sigma2).reshape(So, Si).mean(axis=1)
    kls = jg_kl_terms(fams, var, gam, per, meanv, z, m1, C11, A, b, C)
    return e_rows, kls


# ---------------------------------------------------------------------------
# chained-inducing scheme
# ---------------------------------------------------------------------------

CHAINED_RETRY_FACTOR = 1e-4


def chained_draw_fz(m, C, fz_eps):
    """Independent layer draws f^z_l = m_l + C_l eps, shapes (S, L, M)."""
    return m[None, :, :] + np.einsum("lij,slj->sli", np.tril(C), fz_eps)


def _cond_chols(K_batch, variance):
    """Batched Cholesky with scheduled jitter; returns (chols, jitters)."""
    Sb = K_batch.shape[0]
    schedule = [0.0, 1e-10 * variance, 1e-8 * variance, 1e-6 * variance,
                1e-4 * variance, 1e-2 * variance]
    try:
        return np.linalg.cholesky(K_batch), np.zeros(Sb)
    except np.linalg.LinAlgError:
        pass
    chols = np.empty_like(K_batch)
    jits = np.empty(Sb)
    for s in range(Sb):
        Lc, jit = _chol_with_schedule(K_batch[s], schedule)
        if Lc is None:
            # keep the largest-jitter attempt so the caller can resample
            Lc = np.linalg.cholesky(
                K_batch[s] + (1e-2 * variance + 1e6 * variance) * np.eye(K_batch.shape[1])
            )
            jit = 1e6 * variance
        chols[s] = Lc
        jits[s] = jit
    return chols, jits


def chained_elbo(
    fams, var, gam, per, meanv, z, m, C, x, y, sigma2, fz_eps, retry_eps, f_eps,
    retry_factor=CHAINED_RETRY_FACTOR,
):
    """ELBO pieces for the chained scheme plus operation counters.

    Returns (e_rows (S,), kls (L,), n_chol, n_cond, n_retry). The f^z draws
    feed both the expectation term and the per-sample KL terms. A sample
    whose layer inputs need more than CHAINED_RETRY_FACTOR * variance of
    jitter to factorise is redrawn once from retry_eps.
    """
    S, L, N = f_eps.shape
    M = z.shape[0]
    fz = chained_draw_fz(m, C, fz_eps)
    n_chol = 0
    n_cond = 0
    n_retry = 0

    kls = np.zeros(L)
    prev = None  # (S, N) samples of the previous layer at the data inputs
    cond_locs = None  # (S, M) conditioning locations for the current layer
    for ell in range(L):
        if ell == 0:
            Kc = kern_cross(fams[0], var[0], gam[0], per[0], z, z)[None, :, :]
            chols, jits = _cond_chols(Kc, var[0])
            n_chol += 1
            loc_mean = mean_apply(meanv[0], z)[None, :]
            chols_b = np.broadcast_to(chols, (S, M, M))
        else:
            # conditioning locations are the previous layer's f^z draws;
            # resample once if a sample needs excessive jitter
            locs = fz[:, ell - 1, :]
            Kc = kern_batch(fams[ell], var[ell], gam[ell], per[ell], locs)
            chols, jits = _cond_chols(Kc, var[ell])
            n_chol += S
            bad = jits > retry_factor * var[ell]
            if np.any(bad):
                idx = np.flatnonzero(bad)
                n_retry += idx.size
                fz[idx, ell - 1, :] = m[ell - 1] + retry_eps[idx, ell - 1, :] @ np.tril(
                    C[ell - 1]
                ).T
                locs = fz[:, ell - 1, :]
                Kc_bad = kern_batch(fams[ell], var[ell], gam[ell], per[ell], locs[idx])
                chols_bad, _ = _cond_chols(Kc_bad, var[ell])
                n_chol += idx.size
                chols[idx] = chols_bad
            loc_mean = mean_apply(meanv[ell], locs)
            chols_b = chols
            cond_locs = locs

        vals = fz[:, ell, :]  # (S, M) observed outputs at the conditioning locations
        dvals = vals - loc_mean

        # KL(q(f^z_ell) || prior at the conditioning locations)
        if ell == 0:
            kls[0] = _kl_gauss_chol(m[0], np.tril(C[0]), loc_mean[0], chols[0])
        else:
            Cl = np.tril(C[ell])
            w = np.linalg.solve(chols_b, (m[ell] - loc_mean)[:, :, None])[:, :, 0]
            # tr(Kc^-1 S) = ||Lc^-1 Cl||_F^2 with S = Cl Cl^T
            V = np.linalg.solve(chols_b, np.broadcast_to(Cl, (S, M, M)))
            tr = np.einsum("smk,smk->s", V, V)
            logdet_p = np.sum(np.log(np.diagonal(chols_b, axis1=1, axis2=2)), axis=1)
            logdet_q = np.sum(np.log(np.abs(np.diag(Cl))))
            kl_s = 0.5 * (tr + np.sum(w * w, axis=1) - M) + logdet_p - logdet_q
            kls[ell] = float(np.mean(np.maximum(kl_s, 0.0)))

        # propagate the data points through the layer
        if ell == 0:
            Kct = kern_cross(fams[0], var[0], gam[0], per[0], z, x)
            a = _cho_solve(chols[0], Kct)  # (M, N)
            mu = mean_apply(meanv[0], x)[None, :] + dvals @ a
            s2 = np.broadcast_to(var[0] - np.sum(Kct * a, axis=0), (S, N))
        else:
            t = prev
            Kct = kern_pairs(fams[ell], var[ell], gam[ell], per[ell], cond_locs, t)
            half = np.linalg.solve(chols_b, Kct)  # (S, M, N)
            a = np.linalg.solve(np.transpose(chols_b, (0, 2, 1)), half)
            mu = mean_apply(meanv[ell], t) + np.einsum("sm,smn->sn", dvals, a)
            s2 = var[ell] - np.einsum("smn,smn->sn", Kct, a)
        n_cond += S * N
        sd = np.sqrt(np.maximum(s2, 0.0))
        f = mu + sd * f_eps[:, ell, :]
        prev = f

    e_rows = _loglik_rows(y, prev, sigma2)
    return e_rows, kls, n_chol, n_cond, n_retry


def kern_batch(fam, var, gam, per, locs):
    """Batched kernel matrices k(locs_s, locs_s), locs (S, M) -> (S, M, M)."""
    diff = locs[:, :, None] - locs[:, None, :]
    if fam == FAM_SE:
        return var * np.exp(diff**2 / (-2.0 * gam * gam))
    s = np.sin(np.pi * np.abs(diff) / per)
    return var * np.exp(-2.0 * s * s / (gam * gam))


def kern_pairs(fam, var, gam, per, locs, t):
    """Batched cross-kernels k(locs_s, t_s), (S, M) x (S, N) -> (S, M, N)."""
    diff = locs[:, :, None] - t[:, None, :]
    if fam == FAM_SE:
        return var * np.exp(diff**2 / (-2.0 * gam * gam))
    s = np.sin(np.pi * np.abs(diff) / per)
    return var * np.exp(-2.0 * s * s / (gam * gam))


def chained_propagate(fams, var, gam, per, meanv, z, fz, inputs, f_eps):
    """Draws of every layer at `inputs` given f^z draws (no KL, no retry).

    fz (S, L, M), f_eps (S, L, N) -> draws (L, S, N). Counts are not
    tracked here; sampling paths are not part of the cost contract.
    """
    S, L, N = f_eps.shape
    M = z.shape[0]
    draws = np.empty((L, S, N))
    prev = None
    for ell in range(L):
        if ell == 0:
            Kc = kern_cross(fams[0], var[0], gam[0], per[0], z, z)
            Lc, _ = _chol_with_schedule(
                Kc, [0.0, 1e-10 * var[0], 1e-8 * var[0], 1e-6 * var[0]]
            )
            if Lc is None:
                raise np.linalg.LinAlgError("inducing kernel matrix not PSD")
            loc_mean = mean_apply(meanv[0], z)[None, :]
            dvals = fz[:, 0, :] - loc_mean
            Kct = kern_cross(fams[0], var[0], gam[0], per[0], z, inputs)
            a = _cho_solve(Lc, Kct)
            mu = mean_apply(meanv[0], inputs)[None, :] + dvals @ a
            s2 = np.broadcast_to(var[0] - np.sum(Kct * a, axis=0), (S, N))
        else:
            locs = fz[:, ell - 1, :]
            Kc = kern_batch(fams[ell], var[ell], gam[ell], per[ell], locs)
            chols, _ = _cond_chols(Kc, var[ell])
            loc_mean = mean_apply(meanv[ell], locs)
            dvals = fz[:, ell, :] - loc_mean
            Kct = kern_pairs(fams[ell], var[ell], gam[ell], per[ell], locs, prev)
            half = np.linalg.solve(chols, Kct)
            a = np.linalg.solve(np.transpose(chols, (0, 2, 1)), half)
            mu = mean_apply(meanv[ell], prev) + np.einsum("sm,smn->sn", dvals, a)
            s2 = var[ell] - np.einsum("smn,smn->sn", Kct, a)
        sd = np.sqrt(np.maximum(s2, 0.0))
        f = mu + sd * f_eps[:, ell, :]
        draws[ell] = f
        prev = f
    return draws

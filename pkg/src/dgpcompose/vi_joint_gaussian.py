"""Jointly-Gaussian variational scheme over all layers' inducing values.

q(u_1, ..., u_L) is parametrised as a Gaussian chain: a marginal for the
first layer plus one affine-conditional factor per transition,

    u_1 ~ N(m1, C11 C11^T),   u_l | u_{l-1} ~ N(A_l u_{l-1} + b_l, C_l C_l^T).

Every chain member is a valid joint Gaussian by construction and the
implied precision is block-tridiagonal. Two ELBO estimators are provided:
one that samples the inducing values ancestrally, and one that integrates
them out analytically by carrying per-point conditional moments of u_l
along each sampled trajectory.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _core_py
from ._backend import get_backend
from ._scheme_common import as_inputs, check_finite_rows, model_pack
from .gp_layers import (
    WARM_START_INNER_SCALE,
    alpha,
    prior_at_inducing,
    regression_posterior_at_inducing,
)
from .math_core import InvalidInputError, chol_psd, eval_kernel_matrix
from .results import ElboEstimate, SampleSet
from .vi_meanfield import _estimate, draw_noise_mf


@dataclass(frozen=True)
class ChainGaussianState:
    """Chain parameters: m1 (M,), C11 (M, M) and, per transition,
    A (L-1, M, M), b (L-1, M), C (L-1, M, M). C11 and C are stored
    lower-triangular."""

    m1: np.ndarray
    C11: np.ndarray
    A: np.ndarray
    b: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        m1 = np.ascontiguousarray(self.m1, dtype=float)
        C11 = np.ascontiguousarray(self.C11, dtype=float)
        A = np.ascontiguousarray(self.A, dtype=float)
        b = np.ascontiguousarray(self.b, dtype=float)
        C = np.ascontiguousarray(self.C, dtype=float)
        M = m1.shape[0] if m1.ndim == 1 else -1
        if m1.ndim != 1 or C11.shape != (M, M):
            raise InvalidInputError(
                f"inconsistent first-layer shapes m1 {m1.shape}, C11 {C11.shape}"
            )
        K = A.shape[0] if A.ndim == 3 else -1
        if A.shape != (K, M, M) or b.shape != (K, M) or C.shape != (K, M, M):
            raise InvalidInputError(
                f"inconsistent transition shapes A {A.shape}, b {b.shape}, C {C.shape}"
            )
        for arr, name in ((m1, "m1"), (C11, "C11"), (A, "A"), (b, "b"), (C, "C")):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")
        object.__setattr__(self, "m1", m1)
        object.__setattr__(self, "C11", np.tril(C11))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "C", np.tril(C))

    @property
    def n_layers(self):
        return self.A.shape[0] + 1

    @property
    def M(self):
        return self.m1.shape[0]

    @classmethod
    def from_blocks(cls, means, covs):
        """Build the chain whose marginals and adjacent cross-covariances
        match the given blocks.

        means: (L, M); covs: (L, L, M, M) with covs[i, j] = cov(u_{i+1}, u_{j+1}).
        Only the diagonal and first off-diagonal blocks are consumed; any
        further correlations the blocks imply are not representable here.
        """
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        L, M = means.shape
        if covs.shape != (L, L, M, M):
            raise InvalidInputError(
                f"covs must have shape {(L, L, M, M)}, got {covs.shape}"
            )
        C11, _ = chol_psd(covs[0, 0])
        A = np.empty((L - 1, M, M))
        b = np.empty((L - 1, M))
        C = np.empty((L - 1, M, M))
        for ell in range(1, L):
            Sprev = covs[ell - 1, ell - 1]
            Lp, _ = chol_psd(Sprev)
            # A_l = S_{l,l-1} S_{l-1,l-1}^{-1} via two triangular solves
            A[ell - 1] = np.linalg.solve(
                Lp.T, np.linalg.solve(Lp, covs[ell, ell - 1].T)
            ).T
            b[ell - 1] = means[ell] - A[ell - 1] @ means[ell - 1]
            cond = covs[ell, ell] - A[ell - 1] @ covs[ell - 1, ell - 1] @ A[ell - 1].T
            C[ell - 1], _ = chol_psd(cond)
        return cls(m1=means[0], C11=C11, A=A, b=b, C=C)


def init_joint_gaussian(model, transition_scale=0.0, rng=None, data=None):
    """Prior-centred start with decoupled transitions (A = scale * noise).

    transition_scale > 0 adds a small random A so the chain does not start
    exactly at a mean-field stationary point; requires rng. With
    data=(x, y) the output block's marginal is warm-started at the sparse
    regression posterior of y and the inner blocks start near-deterministic.
    """
    M = model.layers[0].M
    L = model.L
    scale = 0.1 if data is None else WARM_START_INNER_SCALE
    prior1 = prior_at_inducing(model.layers[0])
    L1, _ = chol_psd(prior1.cov)
    m1 = prior1.mean
    C11 = scale * L1
    A = np.zeros((L - 1, M, M))
    if transition_scale > 0.0:
        if rng is None:
            raise InvalidInputError("transition_scale > 0 requires an rng handle")
        A = transition_scale * rng.generator().standard_normal((L - 1, M, M))
    b = np.empty((L - 1, M))
    C = np.empty((L - 1, M, M))
    for ell in range(1, L):
        prior = prior_at_inducing(model.layers[ell])
        Lk, _ = chol_psd(prior.cov)
        b[ell - 1] = prior.mean
        C[ell - 1] = scale * Lk
    if data is not None:
        post = regression_posterior_at_inducing(
            model.layers[-1], *data, model.likelihood_noise
        )
        Cpost, _ = chol_psd(post.cov)
        if L == 1:
            m1 = post.mean
            C11 = Cpost
        else:
            mean_prev = m1
            for ell in range(1, L - 1):
                mean_prev = A[ell - 1] @ mean_prev + b[ell - 1]
            b[L - 2] = post.mean - A[L - 2] @ mean_prev
            C[L - 2] = Cpost
    return ChainGaussianState(m1=m1, C11=C11, A=A, b=b, C=C)


def chain_marginals(state):
    """Marginal means (L, M) and covariances (L, M, M) of the chain."""
    means, covs, _ = _core_py.chain_marginals(
        state.m1, state.C11, state.A, state.b, state.C
    )
    return means, covs


def assemble_joint_blocks(state):
    """Full joint second moments as a block array (L, L, M, M).

    Cross blocks follow from the chain: cov(u_i, u_j) = A_i ... A_{j+1} S_jj
    for i > j. Intended for test oracles and small-model inspection; the
    evaluation paths never form this object.
    """
    means, covs = chain_marginals(state)
    L, M = means.shape
    blocks = np.zeros((L, L, M, M))
    for ell in range(L):
        blocks[ell, ell] = covs[ell]
    for j in range(L):
        acc = covs[j]
        for i in range(j + 1, L):
            acc = state.A[i - 1] @ acc
            blocks[i, j] = acc
            blocks[j, i] = acc.T
    return means, blocks


def kl_chain(model, state):
    """Per-layer decomposition of KL(q(u_1..u_L) || prod_l p(u_l)), (L,)."""
    pack = model_pack(model)
    return np.asarray(
        _core_py.jg_kl_terms(*pack, state.m1, state.C11, state.A, state.b, state.C)
    )


def sample_u_joint(model, state, n_samples, rng):
    """Ancestral draws of all inducing values, shape (S, L, M)."""
    del model  # draws depend only on the variational state
    u_eps = rng.generator().standard_normal((n_samples, state.n_layers, state.M))
    return _core_py.jg_sample_u(state.m1, state.C11, state.A, state.b, state.C, u_eps)


@dataclass(frozen=True)
class ChainStep:
    """Pending per-point quantities produced while evaluating one layer:
    conditional u-moments (h, with cov S_ll - W W^T), the projection vectors
    a, the emitted moments (mean, var) and the gain g = (S_ll - W W^T) a."""

    layer_index: int
    h: np.ndarray  # (Q, M)
    W: np.ndarray  # (Q, M, r)
    mean: np.ndarray  # (Q,)
    var: np.ndarray  # (Q,)
    gain: np.ndarray  # (Q, M)


def marginalised_conditional_chain(model, state, layer_index, inputs, step=None, f_prev=None):
    """Per-point marginal conditional of layer `layer_index` along a trajectory.

    For the first layer pass step=None. For deeper layers pass the ChainStep
    returned by the previous call together with the function values f_prev
    that were realised at that layer; the inducing values of all layers so
    far are integrated out exactly.

    Returns (mean (Q,), var (Q,), ChainStep).
    """
    inputs = as_inputs(inputs, "inputs")
    Q = inputs.size
    layer = model.layers[layer_index]
    M = layer.M
    means, covs = chain_marginals(state)
    Sll = covs[layer_index]

    if layer_index == 0:
        if step is not None or f_prev is not None:
            raise InvalidInputError("first layer takes no previous step")
        h = np.broadcast_to(means[0], (Q, M)).copy()
        W = np.zeros((Q, M, 0))
    else:
        if step is None or f_prev is None:
            raise InvalidInputError(
                "deeper layers need the previous ChainStep and its realised values"
            )
        if step.layer_index != layer_index - 1:
            raise InvalidInputError(
                f"step is for layer {step.layer_index}, expected {layer_index - 1}"
            )
        f_prev = as_inputs(f_prev, "f_prev")
        # absorb the realised values into the conditional u-moments
        resid = (f_prev - step.mean) / np.maximum(step.var, 1e-300)
        h = step.h + step.gain * resid[:, None]
        sd = np.sqrt(np.maximum(step.var, 1e-300))
        W = np.concatenate([step.W, (step.gain / sd[:, None])[:, :, None]], axis=2)
        # advance through the transition to layer_index's u
        Al = state.A[layer_index - 1]
        h = h @ Al.T + state.b[layer_index - 1]
        W = np.einsum("ij,qjr->qir", Al, W)

    a = alpha(layer, inputs)  # (M, Q)
    mu_z = layer.mean_fn.apply(np.asarray(layer.z, dtype=float))
    k_diag = np.full(Q, layer.kernel.variance)
    Kzt = eval_kernel_matrix(layer.kernel, np.asarray(layer.z, dtype=float), inputs)
    mean = layer.mean_fn.apply(inputs) + np.einsum("mq,qm->q", a, h - mu_z)
    Sa = Sll @ a  # (M, Q)
    Wa = np.einsum("mq,qmr->qr", a, W)
    var = (
        k_diag
        - np.sum(Kzt * a, axis=0)
        + np.einsum("mq,mq->q", a, Sa)
        - np.sum(Wa**2, axis=1)
    )
    var = np.maximum(var, 0.0)
    gain = Sa.T - np.einsum("qmr,qr->qm", W, Wa)
    return mean, var, ChainStep(
        layer_index=layer_index, h=h, W=W, mean=mean, var=var, gain=gain
    )


def draw_noise_jg_sampled(n_layers, n_points, n_inducing, n_outer, n_inner, rng):
    """Base noise for the sampled estimator: (u_eps, f_eps)."""
    gen = rng.generator()
    u_eps = gen.standard_normal((n_outer, n_layers, n_inducing))
    f_eps = gen.standard_normal((n_outer, n_inner, n_layers, n_points))
    return u_eps, f_eps


def elbo_jg_analytic_terms(model, state, x, y, eps):
    pack = model_pack(model)
    e_rows, kls = get_backend().jg_elbo_analytic(
        *pack, state.m1, state.C11, state.A, state.b, state.C,
        x, y, model.likelihood_noise, eps,
    )
    return np.asarray(e_rows), np.asarray(kls)


def elbo_jg_sampled_terms(model, state, x, y, u_eps, f_eps):
    pack = model_pack(model)
    e_rows, kls = get_backend().jg_elbo_sampled(
        *pack, state.m1, state.C11, state.A, state.b, state.C,
        x, y, model.likelihood_noise, u_eps, f_eps,
    )
    return np.asarray(e_rows), np.asarray(kls)


def elbo_jg_analytic(model, state, x, y, n_samples, rng):
    """ELBO with inducing values integrated out; noise only enters the
    per-point trajectory draws. Uses the same base-noise layout as the
    mean-field estimator."""
    x = as_inputs(x)
    y = as_inputs(y, "y")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    eps = draw_noise_mf(model.L, x.size, n_samples, rng)
    e_rows, kls = elbo_jg_analytic_terms(model, state, x, y, eps)
    check_finite_rows(e_rows, kls, scheme="joint-gaussian (analytic)")
    return _estimate(e_rows, kls, n_samples)


def elbo_jg_sampled(model, state, x, y, n_samples, rng, n_inner=1):
    """ELBO that samples the inducing values ancestrally (n_samples outer
    draws) and then draws each point's trajectory n_inner times."""
    x = as_inputs(x)
    y = as_inputs(y, "y")
    if n_samples < 1 or n_inner < 1:
        raise InvalidInputError("n_samples and n_inner must be >= 1")
    u_eps, f_eps = draw_noise_jg_sampled(
        model.L, x.size, state.M, n_samples, n_inner, rng
    )
    e_rows, kls = elbo_jg_sampled_terms(model, state, x, y, u_eps, f_eps)
    check_finite_rows(e_rows, kls, scheme="joint-gaussian (sampled)")
    return _estimate(e_rows, kls, n_samples, n_inner=n_inner)


def sample_layers_jg(model, state, inputs, n_samples, rng, mode="analytic"):
    """Joint draws of every layer at `inputs`; mode picks the estimator
    family ("analytic" integrates u out, "sampled" draws it first)."""
    inputs = as_inputs(inputs, "inputs")
    pack = model_pack(model)
    if mode == "analytic":
        eps = draw_noise_mf(model.L, inputs.size, n_samples, rng)
        draws = _core_py.jg_propagate(
            *pack, state.m1, state.C11, state.A, state.b, state.C, inputs, eps
        )
    elif mode == "sampled":
        u_eps, f_eps = draw_noise_jg_sampled(
            model.L, inputs.size, state.M, n_samples, 1, rng
        )
        u = _core_py.jg_sample_u(state.m1, state.C11, state.A, state.b, state.C, u_eps)
        draws = _core_py.jg_propagate_given_u(*pack, u, inputs, f_eps)[:, :, 0, :]
    else:
        raise InvalidInputError(f"mode must be 'analytic' or 'sampled', got {mode!r}")
    return SampleSet(
        inputs=inputs, draws=draws, scheme="joint_gaussian", seed=rng.seed,
        extra={"mode": mode},
    )

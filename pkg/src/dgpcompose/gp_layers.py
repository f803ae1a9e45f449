"""Sparse-GP conditional machinery shared by all variational schemes."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .math_core import (
    InvalidInputError,
    KernelSpec,
    MvnMoments,
    chol_psd,
    eval_kernel_matrix,
    kernel_diag,
)

MEAN_VARIANTS = ("zero", "identity")


@dataclass(frozen=True)
class MeanFnSpec:
    """Layer mean function, either zero or the identity map."""

    variant: str

    def __post_init__(self):
        if self.variant not in MEAN_VARIANTS:
            raise InvalidInputError(
                f"unknown mean function {self.variant!r}; expected one of {MEAN_VARIANTS}"
            )

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.variant == "zero":
            return np.zeros_like(x)
        return x.copy()


@dataclass(frozen=True)
class GPLayerSpec:
    """One layer of the composition: kernel, mean function, inducing locations."""

    kernel: KernelSpec
    mean_fn: MeanFnSpec
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if z.size < 1:
            raise InvalidInputError("a layer needs at least one inducing location")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("non-finite inducing locations")
        if z.size > 1:
            gaps = np.abs(z[:, None] - z[None, :])
            np.fill_diagonal(gaps, np.inf)
            if np.min(gaps) <= 1e-9:
                raise InvalidInputError("inducing locations must be pairwise distinct")
        object.__setattr__(self, "z", z)

    @property
    def M(self):
        return self.z.shape[0]


@dataclass(frozen=True)
class DgpModelSpec:
    """Ordered layer stack plus Gaussian likelihood noise."""

    layers: tuple
    likelihood_noise: float

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) < 1:
            raise InvalidInputError("model needs at least one layer")
        if not (np.isfinite(self.likelihood_noise) and self.likelihood_noise >= 1e-8):
            raise InvalidInputError(
                f"likelihood noise must be >= 1e-8, got {self.likelihood_noise}"
            )
        object.__setattr__(self, "layers", layers)

    @property
    def L(self):
        return len(self.layers)


def default_mean_fns(n_layers):
    """Identity means for inner layers, zero mean for the final layer."""
    if n_layers == 1:
        return [MeanFnSpec("zero")]
    return [MeanFnSpec("identity")] * (n_layers - 1) + [MeanFnSpec("zero")]


def prior_at_inducing(layer):
    """Prior moments of the layer's function values at its inducing locations."""
    K = eval_kernel_matrix(layer.kernel, layer.z, layer.z)
    return MvnMoments(layer.mean_fn.apply(layer.z), K)


# Inner-layer Cholesky scale for data-informed starts.  Near-deterministic
# inner layers keep the first objective evaluations off the divergence guard
# when the likelihood noise is frozen near zero: prior-scale inner jitter
# feeds slope-amplified residuals (and, for sampled inducing locations,
# near-collisions) straight into terms divided by 2*noise.
WARM_START_INNER_SCALE = 1e-3


def regression_posterior_at_inducing(layer, x, y, noise):
    """Optimal q(u) for a single sparse layer regressing y on x at fixed inputs.

    Closed form: with residual targets r = y - mu(x), the evidence-maximising
    Gaussian over the inducing values is
      mean = mu(z) + K S^-1 K(z,x) r / noise,   cov = K S^-1 K,
    where K = K(z,z) and S = K + K(z,x) K(x,z) / noise.

    Warm start for output layers: it interpolates the data as noise -> 0 and
    falls back to the prior as noise -> inf, so the expectation term starts
    at the scale of the residuals this sparse layer can actually achieve
    rather than at -sum(y^2) / (2 noise).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise InvalidInputError(f"x and y lengths differ: {x.size} vs {y.size}")
    if not noise > 0:
        raise InvalidInputError(f"noise must be positive, got {noise}")
    K = eval_kernel_matrix(layer.kernel, layer.z, layer.z)
    Kxz = eval_kernel_matrix(layer.kernel, x, layer.z)
    S = K + (Kxz.T @ Kxz) / noise
    Ls, _ = chol_psd(S)
    r = y - layer.mean_fn.apply(x)
    mean = layer.mean_fn.apply(layer.z) + K @ cho_solve((Ls, True), Kxz.T @ r) / noise
    half = np.linalg.solve(Ls, K)  # cov = half^T half, PSD by construction
    cov = half.T @ half
    return MvnMoments(mean, 0.5 * (cov + cov.T))


def alpha(layer, inputs):
    """Projection K(z, z)^-1 K(z, inputs) as an (M, N) matrix.

    Computed with two triangular solves against the Cholesky factor of
    K(z, z); the inverse is never formed.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1)
    if not np.all(np.isfinite(inputs)):
        raise InvalidInputError("non-finite layer inputs")
    Kzz = eval_kernel_matrix(layer.kernel, layer.z, layer.z)
    Kzi = eval_kernel_matrix(layer.kernel, layer.z, inputs)
    L, _ = chol_psd(Kzz)
    return cho_solve((L, True), Kzi)


def conditional_given_u(layer, inputs, u):
    """GP posterior at `inputs` given inducing values u at the layer's z.

    mean = mu(inputs) + alpha^T (u - mu(z))
    cov  = K(in, in) - alpha^T K(z, z) alpha
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != layer.M:
        raise InvalidInputError(f"u has length {u.shape[0]}, expected M={layer.M}")
    a = alpha(layer, inputs)
    Kii = eval_kernel_matrix(layer.kernel, inputs, inputs)
    Kzi = eval_kernel_matrix(layer.kernel, layer.z, inputs)
    mean = layer.mean_fn.apply(inputs) + a.T @ (u - layer.mean_fn.apply(layer.z))
    cov = Kii - Kzi.T @ a
    return MvnMoments(mean, 0.5 * (cov + cov.T))


def marginal_conditional(layer, inputs, m, S):
    """Layer conditional with the inducing values integrated out under N(m, S).

    mean = mu(inputs) + alpha^T (m - mu(z))
    cov  = K(in, in) - alpha^T (K(z, z) - S) alpha
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1)
    m = np.asarray(m, dtype=float).reshape(-1)
    S = np.asarray(S, dtype=float)
    if m.shape[0] != layer.M or S.shape != (layer.M, layer.M):
        raise InvalidInputError(
            f"variational moments have shapes {m.shape}/{S.shape}, expected M={layer.M}"
        )
    a = alpha(layer, inputs)
    Kii = eval_kernel_matrix(layer.kernel, inputs, inputs)
    Kzi = eval_kernel_matrix(layer.kernel, layer.z, inputs)
    mean = layer.mean_fn.apply(inputs) + a.T @ (m - layer.mean_fn.apply(layer.z))
    cov = Kii - Kzi.T @ a + a.T @ S @ a
    return MvnMoments(mean, 0.5 * (cov + cov.T))


def marginal_conditional_diag(layer, inputs, m, S, chol_Kzz=None):
    """Per-point means and variances of marginal_conditional, without the N x N matrix.

    Returns (mean, var) arrays of the same length as `inputs`. `chol_Kzz`
    lets callers reuse the factorisation of K(z, z) across invocations.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1)
    if chol_Kzz is None:
        Kzz = eval_kernel_matrix(layer.kernel, layer.z, layer.z)
        chol_Kzz, _ = chol_psd(Kzz)
    Kzi = eval_kernel_matrix(layer.kernel, layer.z, inputs)
    a = cho_solve((chol_Kzz, True), Kzi)
    mean = layer.mean_fn.apply(inputs) + a.T @ (
        np.asarray(m, dtype=float) - layer.mean_fn.apply(layer.z)
    )
    Sa = np.asarray(S, dtype=float) @ a
    var = kernel_diag(layer.kernel, inputs) - np.sum(Kzi * a, axis=0) + np.sum(a * Sa, axis=0)
    return mean, np.maximum(var, 0.0)

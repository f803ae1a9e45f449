"""Dense linear algebra, multivariate-normal operations and RNG contracts.

Everything here is a pure function of its inputs (plus an explicit
RngHandle), safe to share across threads.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

KERNEL_FAMILIES = ("se", "periodic")

_FAMILY_ALIASES = {
    "se": "se",
    "squaredexponential": "se",
    "squared_exponential": "se",
    "rbf": "se",
    "periodic": "periodic",
}


class InvalidInputError(ValueError):
    """Raised for malformed or non-finite inputs."""


class NotPsdError(RuntimeError):
    """Raised when a matrix cannot be factorised even with the largest jitter.

    Attributes:
        jitter: the final jitter value that was attempted.
    """

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


def canonical_family(name):
    """Map a kernel family name (any common spelling) to 'se' or 'periodic'."""
    key = str(name).strip().lower().replace("-", "_")
    try:
        return _FAMILY_ALIASES[key]
    except KeyError:
        raise InvalidInputError(
            f"unknown kernel family {name!r}; expected one of {KERNEL_FAMILIES}"
        ) from None


@dataclass(frozen=True)
class KernelSpec:
    """Stationary covariance function with strictly positive hyperparameters.

    Args:
        family: 'se' (squared exponential) or 'periodic'.
        variance: output scale, k(x, x) = variance.
        lengthscale: kernel length scale gamma.
        period: period of the periodic kernel; ignored for 'se'.
    """

    family: str
    variance: float
    lengthscale: float
    period: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_family(self.family))
        for name in ("variance", "lengthscale"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidInputError(f"kernel {name} must be strictly positive, got {value}")
        if self.family == "periodic":
            if self.period is None or not (np.isfinite(self.period) and self.period > 0):
                raise InvalidInputError(
                    f"periodic kernel needs a strictly positive period, got {self.period}"
                )


@dataclass(frozen=True)
class RngHandle:
    """Seed plus stream id; identical handles reproduce identical draws.

    Streams derived with .derive() are statistically independent of each
    other and of the base handle.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.stream) < 0:
            raise InvalidInputError(f"stream id must be non-negative, got {self.stream}")

    def generator(self):
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, stream):
        return RngHandle(self.seed, int(self.stream) * 1000003 + 1 + int(stream))


class MvnMoments:
    """Mean vector and symmetric covariance matrix of the same order."""

    __slots__ = ("mean", "cov")

    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.asarray(cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise InvalidInputError(f"covariance must be square, got shape {cov.shape}")
        if mean.shape[0] != cov.shape[0]:
            raise InvalidInputError(
                f"mean length {mean.shape[0]} does not match covariance order {cov.shape[0]}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise InvalidInputError("non-finite entries in moments")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > 1e-8 * scale:
            raise InvalidInputError("covariance is not symmetric")
        self.mean = mean
        self.cov = 0.5 * (cov + cov.T)

    @property
    def dim(self):
        return self.mean.shape[0]

    def __repr__(self):
        return f"MvnMoments(dim={self.dim})"


def eval_kernel_matrix(kernel, X, Y):
    """Kernel matrix with entry (i, j) = k(X_i, Y_j).

    X and Y are one-dimensional input vectors. For X is Y the result is
    symmetric with the kernel variance on the diagonal.
    """
    X = np.asarray(X, dtype=float).reshape(-1)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if X.size == 0 or Y.size == 0:
        raise InvalidInputError("kernel inputs must be non-empty")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise InvalidInputError("non-finite kernel inputs")
    diff = X[:, None] - Y[None, :]
    if kernel.family == "se":
        return kernel.variance * np.exp(-(diff**2) / (2.0 * kernel.lengthscale**2))
    # periodic: k = v exp(-2 sin^2(pi |x - y| / p) / gamma^2)
    s = np.sin(np.pi * np.abs(diff) / kernel.period)
    return kernel.variance * np.exp(-2.0 * s**2 / kernel.lengthscale**2)


def kernel_diag(kernel, X):
    """k(x, x) for each entry of X; constant for stationary kernels."""
    X = np.asarray(X, dtype=float).reshape(-1)
    return np.full(X.shape[0], kernel.variance)


def default_jitter_schedule(A):
    """Zero followed by {1e-10, 1e-8, 1e-6} scaled by trace/order."""
    A = np.asarray(A, dtype=float)
    scale = float(np.trace(A)) / A.shape[0] if A.shape[0] else 1.0
    if not (np.isfinite(scale) and scale > 0):
        scale = 1.0
    return [0.0, 1e-10 * scale, 1e-8 * scale, 1e-6 * scale]


def chol_psd(A, jitter_schedule=None):
    """Lower Cholesky factor of A + jI for the smallest workable jitter j.

    Args:
        A: symmetric PSD (up to jitter) matrix.
        jitter_schedule: increasing list of jitters to try; defaults to
            default_jitter_schedule(A).

    Returns:
        (L, jitter) with L lower-triangular and L @ L.T = A + jitter * I.

    Raises:
        NotPsdError: every scheduled jitter failed; carries the last jitter.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"matrix must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("non-finite entries in matrix")
    if jitter_schedule is None:
        jitter_schedule = default_jitter_schedule(A)
    eye = np.eye(A.shape[0])
    jitter = 0.0
    for jitter in jitter_schedule:
        try:
            return np.linalg.cholesky(A + jitter * eye), float(jitter)
        except np.linalg.LinAlgError:
            continue
    raise NotPsdError(
        f"matrix of order {A.shape[0]} is not PSD within the jitter schedule", float(jitter)
    )


def sample_mvn(moments, n_samples, rng):
    """Draws from N(mean, cov) as mean + L eps, one draw per row.

    Identical RngHandle values give bit-identical draws.
    """
    if n_samples < 0:
        raise InvalidInputError(f"n_samples must be non-negative, got {n_samples}")
    L, _ = chol_psd(moments.cov)
    eps = rng.generator().standard_normal((int(n_samples), moments.dim))
    return moments.mean[None, :] + eps @ L.T


def gauss_kl(q, p):
    """Closed-form KL(q || p) between two multivariate Gaussians.

    Zero if and only if the moments coincide; computed through Cholesky
    factors, never an explicit inverse.
    """
    if q.dim != p.dim:
        raise InvalidInputError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    if np.array_equal(q.mean, p.mean) and np.array_equal(q.cov, p.cov):
        return 0.0
    Lq, _ = chol_psd(q.cov)
    Lp, _ = chol_psd(p.cov)
    # KL = 0.5 (tr(P^-1 Q) + d^T P^-1 d - k) + log|P|^0.5 - log|Q|^0.5
    M = solve_triangular(Lp, Lq, lower=True)
    w = solve_triangular(Lp, q.mean - p.mean, lower=True)
    k = q.dim
    logdet_term = float(np.sum(np.log(np.diag(Lp))) - np.sum(np.log(np.diag(Lq))))
    kl = 0.5 * (float(np.sum(M**2)) + float(w @ w) - k) + logdet_term
    return max(kl, 0.0)


def gaussian_loglik(y, mean, var):
    """Sum of independent scalar Gaussian log densities log N(y_i | mean_i, var)."""
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    return float(
        np.sum(-0.5 * math.log(2.0 * math.pi * var) - (y - mean) ** 2 / (2.0 * var))
    )

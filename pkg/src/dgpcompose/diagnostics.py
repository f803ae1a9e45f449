"""Compositional-uncertainty diagnostics.

Four probes of how uncertainty moves (or fails to move) through composed
GP layers:

- counterexample_eval: closed-form study of a single squared-exponential
  conditional showing its expected posterior variance can shrink as the
  input gets noisier.
- second_derivative_scan: curvature of the conditional-variance function
  on a growing inducing grid; the negative-curvature pockets that drive
  the shrinkage effect vanish as the grid fills in.
- noisy_input_expansion: small-noise correction of a posterior's
  predictive variance at one point, using finite-difference stencils.
- layer_variance_probe: jackknifed per-layer marginal variance from joint
  posterior draws, the core collapse indicator.
"""

import math
from dataclasses import dataclass

import numpy as np

from .gp_layers import marginal_conditional_diag
from .math_core import InvalidInputError, chol_psd, eval_kernel_matrix, KernelSpec


# ---------------------------------------------------------------------------
# shrinking-variance counterexample
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CounterexampleResult:
    """Expected posterior variance of a 1-point SE conditional under an
    uncertain input x* ~ N(mu_star, sigma_star_sq), with the pinned value
    f(u) = 0.

    expected_variance = 1 - expected_sq_kernel; derivative is with respect
    to sigma_star_sq. shrinks says whether more input noise DECREASES the
    expected variance at sigma_star_sq = 0.
    """

    gamma: float
    u: float
    mu_star: float
    sigma_star_sq: float
    expected_sq_kernel: float
    expected_variance: float
    derivative: float
    derivative_at_zero: float
    shrinks: bool


def counterexample_eval(gamma, u, mu_star, sigma_star_sq=0.0):
    """Closed-form moments for the unit-variance SE kernel conditioned on a
    single inducing location u with value 0.

    The conditional variance at a fixed input x is 1 - k(x, u)^2. Averaging
    over x ~ N(mu_star, s) has a Gaussian integral:

        E[k^2] = (1 + 2s/g^2)^(-1/2) exp(-(u - mu_star)^2 / (g^2 + 2s))

    and d E[var] / ds at s = 0 equals e^{-c/g^2} (1/g^2 - 2c/g^4) with
    c = (u - mu_star)^2, negative exactly when gamma < sqrt(2) |u - mu_star|.
    """
    if not (np.isfinite(gamma) and gamma > 0):
        raise InvalidInputError(f"gamma must be positive, got {gamma}")
    if sigma_star_sq < 0:
        raise InvalidInputError("sigma_star_sq must be non-negative")
    g2 = gamma * gamma
    c = (u - mu_star) ** 2
    s = float(sigma_star_sq)

    def q(s_):
        return math.exp(-c / (g2 + 2 * s_)) / math.sqrt(1.0 + 2 * s_ / g2)

    qs = q(s)

    # v = 1 - q, so dv/ds = -dq/ds = -q(s) (2c/(g2+2s)^2 - 1/(g2+2s))
    def dv(s_):
        return -q(s_) * (2 * c / (g2 + 2 * s_) ** 2 - 1.0 / (g2 + 2 * s_))

    d0 = dv(0.0)
    return CounterexampleResult(
        gamma=float(gamma),
        u=float(u),
        mu_star=float(mu_star),
        sigma_star_sq=s,
        expected_sq_kernel=qs,
        expected_variance=1.0 - qs,
        derivative=dv(s),
        derivative_at_zero=d0,
        shrinks=bool(d0 < 0.0),
    )


def counterexample_flag(gamma, u, mu_star):
    """The shrinkage condition in closed form: gamma < sqrt(2) |u - mu_star|."""
    return gamma < math.sqrt(2.0) * abs(u - mu_star)


# ---------------------------------------------------------------------------
# curvature scan over inducing-grid sizes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanResult:
    m_values: tuple
    minima: np.ndarray  # most negative curvature of the conditional variance
    argmin: np.ndarray  # grid location where it is attained
    gamma: float
    span: float


def second_derivative_scan(m_values=(2, 4, 8, 16, 32), gamma=1.0, center=0.0,
                           span_sds=3.0, grid_n=601):
    """Minimum curvature of the prior-conditional variance per grid size.

    For each M, the interval [center - span_sds * gamma,
    center + span_sds * gamma] is split into M equal cells and one inducing
    location is placed at each cell centre, so coverage stays even instead
    of piling weight on the endpoints.  The conditional variance
    sigma^2(x) = k(x,x) - k(x,Z) K^-1 k(Z,x) is evaluated on a dense grid
    and differentiated twice by central differences.  Negative minima mark
    regions where extra input noise would shrink the variance.
    """
    if grid_n < 5:
        raise InvalidInputError("grid_n must be at least 5")
    if any(int(m) < 2 for m in m_values):
        raise InvalidInputError("each M must be at least 2")
    kern = KernelSpec("se", 1.0, float(gamma))
    lo = center - span_sds * gamma
    hi = center + span_sds * gamma
    xs = np.linspace(lo, hi, int(grid_n))
    h = xs[1] - xs[0]
    minima = np.empty(len(m_values))
    argmin = np.empty(len(m_values))
    for i, M in enumerate(m_values):
        edges = np.linspace(lo, hi, int(M) + 1)
        Z = 0.5 * (edges[:-1] + edges[1:])
        K = eval_kernel_matrix(kern, Z, Z)
        L, _ = chol_psd(K)
        Kzx = eval_kernel_matrix(kern, Z, xs)
        A = np.linalg.solve(L, Kzx)
        var = 1.0 - np.sum(A * A, axis=0)
        curv = (var[2:] - 2.0 * var[1:-1] + var[:-2]) / (h * h)
        j = int(np.argmin(curv))
        minima[i] = curv[j]
        argmin[i] = xs[1 + j]
    return ScanResult(
        m_values=tuple(int(m) for m in m_values), minima=minima,
        argmin=argmin, gamma=float(gamma), span=span_sds * gamma,
    )


# ---------------------------------------------------------------------------
# noisy-input variance expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionResult:
    x_star: float
    input_variance: float
    base_variance: float  # sigma^2(x_star) with the input treated as exact
    mean_slope: float
    variance_curvature: float
    corrected_variance: float
    step: float


def noisy_input_expansion(layer, m, S, x_star, input_variance, step_scale=1e-3):
    """Second-order small-noise correction of the predictive variance.

    V ~= sigma^2(x) + input_variance * [ (d mu / dx)^2 + d^2 sigma^2 / dx^2 ]

    evaluated with 5-point stencils of width step_scale * lengthscale. If a
    stencil result is non-finite the step is widened tenfold once.
    """
    if input_variance < 0:
        raise InvalidInputError("input_variance must be non-negative")
    x_star = float(x_star)

    def moments(points):
        mean, var = marginal_conditional_diag(layer, np.asarray(points), m, S)
        return mean, var

    def stencil(h):
        pts = x_star + h * np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        mean, var = moments(pts)
        dmu = (mean[0] - 8 * mean[1] + 8 * mean[3] - mean[4]) / (12 * h)
        d2v = (-var[0] + 16 * var[1] - 30 * var[2] + 16 * var[3] - var[4]) / (
            12 * h * h
        )
        return mean[2], var[2], dmu, d2v

    h = step_scale * layer.kernel.lengthscale
    _, base, dmu, d2v = stencil(h)
    if not (np.isfinite(dmu) and np.isfinite(d2v)):
        h *= 10.0
        _, base, dmu, d2v = stencil(h)
    corrected = base + input_variance * (dmu * dmu + d2v)
    return ExpansionResult(
        x_star=x_star,
        input_variance=float(input_variance),
        base_variance=float(base),
        mean_slope=float(dmu),
        variance_curvature=float(d2v),
        corrected_variance=float(corrected),
        step=float(h),
    )


# ---------------------------------------------------------------------------
# per-layer marginal variance with jackknife error bars
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceProbe:
    layer_index: int
    point_index: int
    variance: float
    se: float
    n_samples: int


def layer_variance_probe(sample_set, layer_index, point_index=0, n_blocks=10):
    """Marginal variance of one layer at one input with a delete-one-block
    jackknife standard error."""
    draws = sample_set.draws[layer_index, :, point_index]
    S = draws.shape[0]
    if S < 2 * n_blocks:
        raise InvalidInputError(
            f"need at least {2 * n_blocks} samples for {n_blocks} blocks, got {S}"
        )
    full = float(np.var(draws, ddof=1))
    usable = S - (S % n_blocks)
    blocks = draws[:usable].reshape(n_blocks, -1)
    leave_out = np.array(
        [
            np.var(np.delete(blocks, k, axis=0).reshape(-1), ddof=1)
            for k in range(n_blocks)
        ]
    )
    se = math.sqrt(
        (n_blocks - 1) / n_blocks * float(np.sum((leave_out - leave_out.mean()) ** 2))
    )
    return VarianceProbe(
        layer_index=int(layer_index),
        point_index=int(point_index),
        variance=full,
        se=se,
        n_samples=S,
    )

"""Chained-inducing variational scheme.

Each layer keeps an independent Gaussian q(f^z_l) = N(m_l, C_l C_l^T) over
its function values at the previous layer's inducing outputs: layer 1 is
anchored at fixed input locations z, layer l >= 2 conditions on the sampled
values f^z_{l-1} as its inducing locations. Inducing locations of deeper
layers therefore move with the posterior instead of living on a fixed grid.

Per MC sample the scheme draws all f^z_l, conditions every layer on the
pair (f^z_{l-1} -> f^z_l), and scores the data through the resulting chain.
KL terms for l >= 2 depend on the sampled locations and are averaged over
the same draws that feed the expectation term.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import _core_py
from ._backend import get_backend
from ._scheme_common import as_inputs, check_finite_rows, model_pack
from .gp_layers import WARM_START_INNER_SCALE, regression_posterior_at_inducing
from .math_core import InvalidInputError, chol_psd, eval_kernel_matrix
from .results import ElboEstimate, SampleSet

# a sample whose conditioning matrix needs more jitter than this (times the
# kernel variance) is considered degenerate and redrawn once
CHAINED_RETRY_FACTOR = 1e-4


@dataclass(frozen=True)
class ChainedInducingState:
    """Variational parameters per layer: means m (L, M) over f^z_l and
    lower-triangular factors C (L, M, M) with S_l = C_l C_l^T."""

    m: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.m, dtype=float)
        C = np.ascontiguousarray(self.C, dtype=float)
        if m.ndim != 2 or C.shape != (*m.shape, m.shape[1]):
            raise InvalidInputError(
                f"inconsistent state shapes m {m.shape}, C {C.shape}"
            )
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(C))):
            raise InvalidInputError("state contains non-finite values")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "C", np.tril(C))

    @property
    def n_layers(self):
        return self.m.shape[0]


@dataclass
class OpCounters:
    """Running operation counts across ELBO evaluations.

    n_chol counts M x M Cholesky factorisations, n_cond scalar conditional
    moments, n_retry degenerate-location resamples.
    """

    n_chol: int = 0
    n_cond: int = 0
    n_retry: int = 0
    n_evals: int = 0

    def accumulate(self, n_chol, n_cond, n_retry):
        self.n_chol += int(n_chol)
        self.n_cond += int(n_cond)
        self.n_retry += int(n_retry)
        self.n_evals += 1


def init_chained(model, data=None):
    """Identity-propagated start: m_1 = mu_1(z), m_l = mu_l(m_{l-1});
    S_l = 1e-2 * K_l at the corresponding locations.

    With data=(x, y) the output layer is warm-started at the sparse
    regression posterior of y at its initial conditioning locations, and the
    inner layers start near-deterministic so those locations barely scatter
    across early samples.
    """
    scale = 0.1 if data is None else WARM_START_INNER_SCALE
    z = np.asarray(model.layers[0].z, dtype=float)
    ms, Cs = [], []
    locs = z
    for layer in model.layers:
        m_l = layer.mean_fn.apply(locs)
        K = eval_kernel_matrix(layer.kernel, locs, locs)
        Lk, _ = chol_psd(K)
        ms.append(m_l)
        Cs.append(scale * Lk)
        prev_locs, locs = locs, m_l
    if data is not None:
        final = replace(model.layers[-1], z=prev_locs)
        post = regression_posterior_at_inducing(final, *data, model.likelihood_noise)
        ms[-1] = post.mean
        Cs[-1], _ = chol_psd(post.cov)
    return ChainedInducingState(m=np.stack(ms), C=np.stack(Cs))


def draw_noise_chained(n_layers, n_points, n_inducing, n_samples, rng):
    """Base noise for one evaluation: (fz_eps, retry_eps, f_eps)."""
    gen = rng.generator()
    fz_eps = gen.standard_normal((n_samples, n_layers, n_inducing))
    retry_eps = gen.standard_normal((n_samples, n_layers, n_inducing))
    f_eps = gen.standard_normal((n_samples, n_layers, n_points))
    return fz_eps, retry_eps, f_eps


def elbo_chained_terms(model, state, x, y, noise):
    """Deterministic ELBO pieces given base noise.

    Returns (e_rows (S,), kls (L,), n_chol, n_cond, n_retry).
    """
    fz_eps, retry_eps, f_eps = noise
    fams, var, gam, per, meanv, z = model_pack(model)
    out = get_backend().chained_elbo(
        fams, var, gam, per, meanv, z[0], state.m, state.C,
        x, y, model.likelihood_noise, fz_eps, retry_eps, f_eps,
        CHAINED_RETRY_FACTOR,
    )
    e_rows, kls, n_chol, n_cond, n_retry = out
    return np.asarray(e_rows), np.asarray(kls), int(n_chol), int(n_cond), int(n_retry)


def elbo_chained(model, state, x, y, n_samples, rng, counters=None):
    """Unbiased ELBO estimate; KL terms beyond layer 1 are themselves MC
    averages over the sampled inducing locations."""
    x = as_inputs(x)
    y = as_inputs(y, "y")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    noise = draw_noise_chained(model.L, x.size, model.layers[0].M, n_samples, rng)
    e_rows, kls, n_chol, n_cond, n_retry = elbo_chained_terms(model, state, x, y, noise)
    if counters is not None:
        counters.accumulate(n_chol, n_cond, n_retry)
    if n_retry:
        warnings.warn(
            f"{n_retry} sampled inducing-location sets were degenerate and "
            "were redrawn once",
            RuntimeWarning,
            stacklevel=2,
        )
    check_finite_rows(e_rows, kls, scheme="chained-inducing")
    e_mean = float(np.mean(e_rows))
    kl_sum = float(np.sum(kls))
    se = float(np.std(e_rows, ddof=1) / math.sqrt(len(e_rows))) if len(e_rows) > 1 else 0.0
    return ElboEstimate(
        value=e_mean - kl_sum,
        expectation_term=e_mean,
        kl_term=kl_sum,
        expectation_se=se,
        kl_per_layer=kls,
        n_samples=n_samples,
    )


def sample_layers_chained(model, state, inputs, n_samples, rng):
    """Joint draws of every layer at `inputs` under the fitted posterior.

    Degenerate sampled locations are handled by the jitter schedule alone
    here; the redraw pass only runs inside ELBO evaluation.
    """
    inputs = as_inputs(inputs, "inputs")
    fz_eps, _, f_eps = draw_noise_chained(
        model.L, inputs.size, model.layers[0].M, n_samples, rng
    )
    fams, var, gam, per, meanv, z = model_pack(model)
    fz = _core_py.chained_draw_fz(state.m, state.C, fz_eps)
    draws = _core_py.chained_propagate(
        fams, var, gam, per, meanv, z[0], fz, inputs, f_eps
    )
    return SampleSet(
        inputs=inputs, draws=draws, scheme="chained", seed=rng.seed
    )


def predict_chained(model, state, grid, n_samples, rng):
    """Posterior predictive summary on a grid: (mean (Q,), var (Q,)) of the
    final layer, MC-estimated from n_samples joint draws."""
    samples = sample_layers_chained(model, state, grid, n_samples, rng)
    fL = samples.draws[-1]
    return fL.mean(axis=0), fL.var(axis=0, ddof=1)

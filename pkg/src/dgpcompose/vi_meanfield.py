"""Mean-field variational scheme: independent Gaussian q(u_l) per layer.

The ELBO is a doubly-stochastic estimate: inducing values are integrated out
of every layer's conditional in closed form, then one function value per
data point is drawn layer by layer. Cost per evaluation is linear in the
number of data points.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _core_py
from ._backend import get_backend
from ._scheme_common import as_inputs, check_finite_rows, model_pack
from .gp_layers import (
    WARM_START_INNER_SCALE,
    prior_at_inducing,
    regression_posterior_at_inducing,
)
from .math_core import InvalidInputError, chol_psd
from .results import ElboEstimate, SampleSet


@dataclass(frozen=True)
class MeanFieldState:
    """Variational parameters: means m (L, M) and Cholesky factors C (L, M, M).

    q(u_l) = N(m[l], C[l] C[l]^T); C is stored lower-triangular.
    """

    m: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.m, dtype=float)
        C = np.ascontiguousarray(self.C, dtype=float)
        if m.ndim != 2 or C.ndim != 3 or C.shape != (*m.shape, m.shape[1]):
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


def init_meanfield(model, data=None):
    """Prior-centred start: m_l = mu_l(z_l), C_l = 0.1 * chol(K_l).

    With data=(x, y) the output layer is warm-started at the sparse
    regression posterior of y and the inner layers start near-deterministic
    at their mean functions.
    """
    scale = 0.1 if data is None else WARM_START_INNER_SCALE
    ms, Cs = [], []
    for layer in model.layers:
        prior = prior_at_inducing(layer)
        L, _ = chol_psd(prior.cov)
        ms.append(prior.mean)
        Cs.append(scale * L)
    if data is not None:
        post = regression_posterior_at_inducing(
            model.layers[-1], *data, model.likelihood_noise
        )
        ms[-1] = post.mean
        Cs[-1], _ = chol_psd(post.cov)
    return MeanFieldState(m=np.stack(ms), C=np.stack(Cs))


def draw_noise_mf(n_layers, n_points, n_samples, rng):
    """Base noise for one evaluation, shape (S, L, N)."""
    return rng.generator().standard_normal((n_samples, n_layers, n_points))


def elbo_mf_terms(model, state, x, y, eps):
    """Deterministic ELBO pieces given base noise: (e_rows (S,), kls (L,))."""
    pack = model_pack(model)
    e_rows, kls = get_backend().mf_elbo(
        *pack, state.m, state.C, x, y, model.likelihood_noise, eps
    )
    return np.asarray(e_rows), np.asarray(kls)


def _estimate(e_rows, kls, n_samples, n_inner=None):
    e_mean = float(np.mean(e_rows))
    kl_sum = float(np.sum(kls))
    se = float(np.std(e_rows, ddof=1) / math.sqrt(len(e_rows))) if len(e_rows) > 1 else 0.0
    return ElboEstimate(
        value=e_mean - kl_sum,
        expectation_term=e_mean,
        kl_term=kl_sum,
        expectation_se=se,
        kl_per_layer=np.asarray(kls, dtype=float),
        n_samples=n_samples,
        n_inner=n_inner,
    )


def elbo_mf(model, state, x, y, n_samples, rng):
    """Unbiased ELBO estimate with fresh iid noise from rng."""
    x = as_inputs(x)
    y = as_inputs(y, "y")
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    eps = draw_noise_mf(model.L, x.size, n_samples, rng)
    e_rows, kls = elbo_mf_terms(model, state, x, y, eps)
    check_finite_rows(e_rows, kls, scheme="mean-field")
    return _estimate(e_rows, kls, n_samples)


def sample_layers_mf(model, state, inputs, n_samples, rng):
    """Joint draws of every layer at `inputs` under the fitted posterior."""
    inputs = as_inputs(inputs, "inputs")
    eps = draw_noise_mf(model.L, inputs.size, n_samples, rng)
    pack = model_pack(model)
    draws = _core_py.mf_propagate(*pack, state.m, state.C, inputs, eps)
    return SampleSet(
        inputs=inputs, draws=draws, scheme="meanfield", seed=rng.seed
    )

"""Training loop: common-random-number finite-difference gradients + Adam.

Every objective evaluation is a deterministic function of the flat raw
parameter vector because the base noise is frozen between refreshes. The
frozen noise is standardised per point (exact zero mean, unit second moment
across the sample axis), which for a single layer makes the stochastic
objective agree with the closed-form bound identically; for deep models it
is a plain variance reduction. Published ELBO numbers always come from
fresh, unstandardised noise.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._backend import get_backend
from ._scheme_common import model_pack, standardise_rows
from .gp_layers import DgpModelSpec, GPLayerSpec
from .math_core import InvalidInputError, KernelSpec, RngHandle
from .vi_chained_inducing import (
    CHAINED_RETRY_FACTOR,
    OpCounters,
    draw_noise_chained,
    elbo_chained,
    elbo_chained_terms,
    init_chained,
)
from .vi_joint_gaussian import (
    draw_noise_jg_sampled,
    elbo_jg_analytic,
    elbo_jg_analytic_terms,
    elbo_jg_sampled,
    elbo_jg_sampled_terms,
    init_joint_gaussian,
)
from .vi_meanfield import draw_noise_mf, elbo_mf, elbo_mf_terms, init_meanfield

SCHEMES = ("meanfield", "joint_gaussian", "joint_gaussian_sampled", "chained")

TRANSFORMS = ("identity", "softplus", "softplus_floor", "tril_posdiag")


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_inv(y):
    """Inverse of softplus, stable for small and large arguments."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise InvalidInputError("softplus_inv needs strictly positive inputs")
    # log(expm1(y)) is accurate until expm1 saturates; above that the direct
    # form y + log1p(-e^-y) is exact and free of cancellation
    small = y < 10.0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        main = y + np.log1p(-np.exp(-y))
        tiny = np.log(np.expm1(np.where(small, y, 1.0)))
    return np.where(small, tiny, main)


@dataclass(frozen=True)
class ParamBlock:
    """One named group of degrees of freedom inside the flat vector.

    shape is the constrained value's shape; tril_posdiag blocks store only
    the lower-triangular entries and squash the diagonal through softplus.
    """

    name: str
    shape: tuple
    transform: str = "identity"
    floor: float = 0.0

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise InvalidInputError(f"unknown transform {self.transform!r}")
        if self.transform == "tril_posdiag" and (
            len(self.shape) < 2 or self.shape[-1] != self.shape[-2]
        ):
            raise InvalidInputError("tril_posdiag needs trailing square dims")

    @cached_property
    def _lead(self):
        return int(np.prod(self.shape[:-2], dtype=int))

    @cached_property
    def _tril_rc(self):
        return np.tril_indices(self.shape[-1])

    @cached_property
    def size(self):
        if self.transform == "tril_posdiag":
            M = self.shape[-1]
            return self._lead * (M * (M + 1)) // 2
        return int(np.prod(self.shape, dtype=int))

    def forward(self, raw):
        if self.transform == "identity":
            return raw.reshape(self.shape)
        if self.transform == "softplus":
            return softplus(raw).reshape(self.shape)
        if self.transform == "softplus_floor":
            return (self.floor + softplus(raw)).reshape(self.shape)
        M = self.shape[-1]
        rows, cols = self._tril_rc
        out = np.zeros((self._lead, M, M))
        out[:, rows, cols] = raw.reshape(self._lead, -1)
        d = np.arange(M)
        out[:, d, d] = softplus(out[:, d, d])
        return out.reshape(self.shape)

    def inverse(self, value):
        value = np.asarray(value, dtype=float)
        if value.shape != self.shape:
            raise InvalidInputError(
                f"block {self.name}: expected shape {self.shape}, got {value.shape}"
            )
        if self.transform == "identity":
            return value.reshape(-1).copy()
        if self.transform == "softplus":
            return softplus_inv(value).reshape(-1)
        if self.transform == "softplus_floor":
            return softplus_inv(value - self.floor).reshape(-1)
        M = self.shape[-1]
        lead = int(np.prod(self.shape[:-2], dtype=int))
        mats = value.reshape(lead, M, M)
        rows, cols = np.tril_indices(M)
        out = []
        for k in range(lead):
            mat = np.tril(mats[k]).copy()
            d = np.diag_indices(M)
            mat[d] = softplus_inv(mat[d])
            out.append(mat[rows, cols])
        return np.concatenate(out)


class ParamVector:
    """Flat raw vector plus the block layout that maps it to constrained
    values. Raw space is unconstrained, so optimisers can move freely."""

    def __init__(self, blocks, theta):
        self.blocks = tuple(blocks)
        theta = np.ascontiguousarray(theta, dtype=float)
        want = sum(b.size for b in self.blocks)
        if theta.shape != (want,):
            raise InvalidInputError(f"theta must have shape ({want},), got {theta.shape}")
        self.theta = theta

    @classmethod
    def pack(cls, blocks, values):
        parts = []
        for b in blocks:
            if b.name not in values:
                raise InvalidInputError(f"missing value for block {b.name!r}")
            parts.append(b.inverse(values[b.name]))
        return cls(blocks, np.concatenate(parts) if parts else np.zeros(0))

    def unpack(self):
        out = {}
        off = 0
        for b in self.blocks:
            out[b.name] = b.forward(self.theta[off : off + b.size])
            off += b.size
        return out

    def with_theta(self, theta):
        return ParamVector(self.blocks, theta)

    @property
    def size(self):
        return self.theta.shape[0]


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(state, theta, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One ascent step; returns (new_theta, new_state)."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad**2
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    new_theta = theta + lr * mhat / (np.sqrt(vhat) + eps)
    return new_theta, AdamState(m=m, v=v, t=t)


def grad_crn(objective, theta, h_scale=1e-4, executor=None):
    """Central finite differences under common random numbers.

    The objective must be deterministic; each coordinate i is perturbed by
    h_i = h_scale * (1 + |theta_i|). With an executor the per-coordinate
    evaluations are dispatched concurrently but assembled in coordinate
    order, so the result never depends on scheduling.
    """
    theta = np.asarray(theta, dtype=float)
    h = h_scale * (1.0 + np.abs(theta))

    def one(i):
        up = theta.copy()
        up[i] += h[i]
        dn = theta.copy()
        dn[i] -= h[i]
        return (objective(up) - objective(dn)) / (2.0 * h[i])

    if executor is None:
        return np.array([one(i) for i in range(theta.size)])
    return np.array(list(executor.map(one, range(theta.size))))


# ---------------------------------------------------------------------------
# scheme adapters: (model, state) <-> ParamVector
# ---------------------------------------------------------------------------


def _hyper_blocks(model, train_hypers, train_noise):
    blocks = []
    values = {}
    if train_hypers:
        for ell, layer in enumerate(model.layers):
            blocks.append(ParamBlock(f"kern_var_{ell}", (), "softplus"))
            blocks.append(ParamBlock(f"kern_len_{ell}", (), "softplus"))
            values[f"kern_var_{ell}"] = np.float64(layer.kernel.variance)
            values[f"kern_len_{ell}"] = np.float64(layer.kernel.lengthscale)
    if train_noise:
        blocks.append(ParamBlock("noise", (), "softplus_floor", floor=1e-8))
        values["noise"] = np.float64(model.likelihood_noise)
    return blocks, values


def _rebuild_model(model, vals, train_hypers, train_noise):
    if not train_hypers and not train_noise:
        return model
    layers = []
    for ell, layer in enumerate(model.layers):
        if train_hypers:
            kern = KernelSpec(
                family=layer.kernel.family,
                variance=float(vals[f"kern_var_{ell}"]),
                lengthscale=float(vals[f"kern_len_{ell}"]),
                period=layer.kernel.period,
            )
            layers.append(GPLayerSpec(kernel=kern, mean_fn=layer.mean_fn, z=layer.z))
        else:
            layers.append(layer)
    noise = float(vals["noise"]) if train_noise else model.likelihood_noise
    return DgpModelSpec(layers=tuple(layers), likelihood_noise=noise)


@dataclass(frozen=True)
class SchemeProblem:
    """Bundle of everything the optimiser needs for one scheme."""

    scheme: str
    params: ParamVector
    rebuild: callable  # theta-values dict -> (model, state)
    draw_noise: callable  # (n_samples, rng) -> noise pytree
    terms: callable  # (model, state, noise) -> (e_rows, kls, ...)
    evaluate: callable  # (model, state, n_samples, rng) -> ElboEstimate
    init_state: object
    # (values dict, noise) -> (e_rows, kls) without reconstructing the model
    # or state; only set when neither hyperparameters nor noise are trained,
    # where it is numerically identical to rebuild + terms.
    terms_raw: callable = None


def make_problem(scheme, model, x, y, init_state=None, train_hypers=False,
                 train_noise=False, n_inner=1, transition_scale=0.0, rng=None):
    """Build the ParamVector and closures for one scheme on one dataset."""
    if scheme not in SCHEMES:
        raise InvalidInputError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    L = model.L
    M = model.layers[0].M
    N = len(np.asarray(x))
    hblocks, hvalues = _hyper_blocks(model, train_hypers, train_noise)

    if scheme == "meanfield":
        state = init_state if init_state is not None else init_meanfield(model, data=(x, y))
        blocks = [
            ParamBlock("m", (L, M)),
            ParamBlock("C", (L, M, M), "tril_posdiag"),
        ] + hblocks
        values = {"m": state.m, "C": state.C, **hvalues}

        def rebuild(vals):
            from .vi_meanfield import MeanFieldState

            return (
                _rebuild_model(model, vals, train_hypers, train_noise),
                MeanFieldState(m=vals["m"], C=vals["C"]),
            )

        def draw(n, rng_):
            return draw_noise_mf(L, N, n, rng_)

        def terms(mdl, st, noise):
            return elbo_mf_terms(mdl, st, x, y, noise)

        def evaluate(mdl, st, n, rng_):
            return elbo_mf(mdl, st, x, y, n, rng_)

    elif scheme in ("joint_gaussian", "joint_gaussian_sampled"):
        state = (
            init_state
            if init_state is not None
            else init_joint_gaussian(
                model, transition_scale=transition_scale, rng=rng, data=(x, y)
            )
        )
        blocks = [
            ParamBlock("m1", (M,)),
            ParamBlock("C11", (M, M), "tril_posdiag"),
            ParamBlock("A", (L - 1, M, M)),
            ParamBlock("b", (L - 1, M)),
            ParamBlock("C", (L - 1, M, M), "tril_posdiag"),
        ] + hblocks
        values = {
            "m1": state.m1, "C11": state.C11, "A": state.A, "b": state.b,
            "C": state.C, **hvalues,
        }

        def rebuild(vals):
            from .vi_joint_gaussian import ChainGaussianState

            return (
                _rebuild_model(model, vals, train_hypers, train_noise),
                ChainGaussianState(
                    m1=vals["m1"], C11=vals["C11"], A=vals["A"],
                    b=vals["b"], C=vals["C"],
                ),
            )

        if scheme == "joint_gaussian":
            def draw(n, rng_):
                return draw_noise_mf(L, N, n, rng_)

            def terms(mdl, st, noise):
                return elbo_jg_analytic_terms(mdl, st, x, y, noise)

            def evaluate(mdl, st, n, rng_):
                return elbo_jg_analytic(mdl, st, x, y, n, rng_)
        else:
            def draw(n, rng_):
                return draw_noise_jg_sampled(L, N, M, n, n_inner, rng_)

            def terms(mdl, st, noise):
                return elbo_jg_sampled_terms(mdl, st, x, y, noise[0], noise[1])

            def evaluate(mdl, st, n, rng_):
                return elbo_jg_sampled(mdl, st, x, y, n, rng_, n_inner=n_inner)

    else:  # chained
        state = init_state if init_state is not None else init_chained(model, data=(x, y))
        blocks = [
            ParamBlock("m", (L, M)),
            ParamBlock("C", (L, M, M), "tril_posdiag"),
        ] + hblocks
        values = {"m": state.m, "C": state.C, **hvalues}

        def rebuild(vals):
            from .vi_chained_inducing import ChainedInducingState

            return (
                _rebuild_model(model, vals, train_hypers, train_noise),
                ChainedInducingState(m=vals["m"], C=vals["C"]),
            )

        def draw(n, rng_):
            return draw_noise_chained(L, N, M, n, rng_)

        def terms(mdl, st, noise):
            return elbo_chained_terms(mdl, st, x, y, noise)[:2]

        def evaluate(mdl, st, n, rng_):
            return elbo_chained(mdl, st, x, y, n, rng_)

    # With the model frozen, every objective evaluation rebuilds identical
    # spec/state objects just to tear them back into arrays.  The gradient
    # probes dominate training cost, so give them a direct line to the
    # backend: flatten the model once and feed the unpacked values straight
    # in.  ParamBlock.forward already emits lower-triangular factors, so
    # this is byte-for-byte the same arithmetic.
    terms_raw = None
    if not train_hypers and not train_noise:
        pack = model_pack(model)
        be = get_backend()
        s2 = model.likelihood_noise
        if scheme == "meanfield":
            def terms_raw(vals, eps):
                return be.mf_elbo(*pack, vals["m"], vals["C"], x, y, s2, eps)
        elif scheme == "joint_gaussian":
            def terms_raw(vals, eps):
                return be.jg_elbo_analytic(
                    *pack, vals["m1"], vals["C11"], vals["A"], vals["b"],
                    vals["C"], x, y, s2, eps,
                )
        elif scheme == "joint_gaussian_sampled":
            def terms_raw(vals, noise):
                return be.jg_elbo_sampled(
                    *pack, vals["m1"], vals["C11"], vals["A"], vals["b"],
                    vals["C"], x, y, s2, noise[0], noise[1],
                )
        else:
            fams, var, gam, per, meanv, z = pack

            def terms_raw(vals, noise):
                out = be.chained_elbo(
                    fams, var, gam, per, meanv, z[0], vals["m"], vals["C"],
                    x, y, s2, noise[0], noise[1], noise[2],
                    CHAINED_RETRY_FACTOR,
                )
                return out[0], out[1]

    params = ParamVector.pack(blocks, values)
    return SchemeProblem(
        scheme=scheme, params=params, rebuild=rebuild, draw_noise=draw,
        terms=terms, evaluate=evaluate, init_state=state, terms_raw=terms_raw,
    )


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------

TRACE_FIELDS = (
    "iteration", "elbo_train", "elbo_eval", "expectation_term", "kl_term",
    "grad_norm", "seconds",
)

DIVERGENCE_FLOOR = -1e8


class TrainingDivergedError(RuntimeError):
    """Objective fell below the divergence floor; carries the trace rows."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class FitResult:
    scheme: str
    model: DgpModelSpec
    state: object
    trace: list
    final: object  # ElboEstimate from an independent evaluation stream
    counters: OpCounters = field(default_factory=OpCounters)
    seed: int = 0


def _standardise_noise(noise):
    """Per-point moment matching of the frozen base noise (training only)."""
    if isinstance(noise, tuple):
        return tuple(standardise_rows(part) for part in noise)
    return standardise_rows(noise)


def fit(model, scheme, x, y, *, iters=800, lr=5e-3, n_samples=10, seed=0,
        refresh_noise_every=10, eval_every=25, eval_samples=2000,
        train_hypers=False, train_noise=False, n_inner=1,
        transition_scale=0.0, init_state=None, threads=1, h_scale=1e-4,
        moment_match=True):
    """Maximise the chosen scheme's ELBO with CRN gradients and Adam.

    Noise is frozen for refresh_noise_every iterations at a time so the
    finite-difference gradient sees a smooth deterministic objective.  The
    step size holds at lr for the first half of the run, then decays
    linearly to a tenth: near-zero likelihood noise makes the objective so
    stiff that constant-size Adam steps rattle around the optimum instead of
    settling into it.  Returns a FitResult whose `final` estimate always
    uses fresh iid noise from an independent stream.
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    base = RngHandle(seed)
    problem = make_problem(
        scheme, model, x, y, init_state=init_state, train_hypers=train_hypers,
        train_noise=train_noise, n_inner=n_inner,
        transition_scale=transition_scale, rng=base.derive(900_001),
    )
    pv = problem.params
    adam = AdamState.zeros(pv.size)
    theta = pv.theta.copy()
    counters = OpCounters()
    trace = []
    t0 = time.perf_counter()
    noise = None

    if problem.terms_raw is not None:
        def objective(th):
            e_rows, kls = problem.terms_raw(pv.with_theta(th).unpack(), noise)
            return float(np.mean(e_rows)) - float(np.sum(kls))
    else:
        def objective(th):
            vals = pv.with_theta(th).unpack()
            mdl, st = problem.rebuild(vals)
            out = problem.terms(mdl, st, noise)
            e_rows, kls = out[0], out[1]
            return float(np.mean(e_rows)) - float(np.sum(kls))

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for it in range(iters):
            if it % refresh_noise_every == 0:
                raw = problem.draw_noise(n_samples, base.derive(it))
                noise = _standardise_noise(raw) if moment_match else raw
            g = grad_crn(objective, theta, h_scale=h_scale, executor=executor)
            value = objective(theta)
            if not np.isfinite(value) or value < DIVERGENCE_FLOOR:
                raise TrainingDivergedError(
                    f"{scheme} objective diverged at iteration {it}: {value}", trace
                )
            if it % eval_every == 0 or it == iters - 1:
                vals = pv.with_theta(theta).unpack()
                mdl, st = problem.rebuild(vals)
                est = problem.evaluate(mdl, st, eval_samples, base.derive(10_000_000 + it))
                row = {
                    "iteration": it,
                    "elbo_train": value,
                    "elbo_eval": est.value,
                    "expectation_term": est.expectation_term,
                    "kl_term": est.kl_term,
                    "grad_norm": float(np.linalg.norm(g)),
                    "seconds": time.perf_counter() - t0,
                }
                trace.append(row)
            frac = it / iters
            cur_lr = lr if frac < 0.5 else lr * (1.0 - 1.8 * (frac - 0.5))
            theta, adam = adam_step(adam, theta, g, cur_lr)
    finally:
        if executor is not None:
            executor.shutdown(wait=False)

    vals = pv.with_theta(theta).unpack()
    mdl, st = problem.rebuild(vals)
    if scheme == "chained":
        final = elbo_chained(
            mdl, st, x, y, eval_samples, base.derive(123_456_789), counters=counters
        )
    else:
        final = problem.evaluate(mdl, st, eval_samples, base.derive(123_456_789))
    return FitResult(
        scheme=scheme, model=mdl, state=st, trace=trace, final=final,
        counters=counters, seed=seed,
    )

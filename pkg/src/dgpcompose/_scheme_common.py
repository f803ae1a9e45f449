"""Shared plumbing for the three variational schemes."""

import numpy as np

from . import _core_py
from .gp_layers import DgpModelSpec
from .math_core import InvalidInputError

_FAMILY_CODES = {"se": _core_py.FAM_SE, "periodic": _core_py.FAM_PERIODIC}
_MEAN_CODES = {"zero": _core_py.MEAN_ZERO, "identity": _core_py.MEAN_IDENTITY}


class ElboEvaluationError(RuntimeError):
    """Raised when an ELBO evaluation produced non-finite values.

    layer_index is the first layer (0-based) whose moments degenerated, or
    None when the failure could not be localised.
    """

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


def model_pack(model):
    """Flatten a DgpModelSpec into the plain arrays the backends consume.

    Requires every layer to share one inducing count so z stacks to (L, M).
    """
    if not isinstance(model, DgpModelSpec):
        raise InvalidInputError(f"expected DgpModelSpec, got {type(model).__name__}")
    Ms = {layer.M for layer in model.layers}
    if len(Ms) != 1:
        raise InvalidInputError(
            f"layers must share one inducing count, got {sorted(Ms)}"
        )
    fams = np.array(
        [_FAMILY_CODES[layer.kernel.family] for layer in model.layers], dtype=np.int64
    )
    var = np.array([layer.kernel.variance for layer in model.layers])
    gam = np.array([layer.kernel.lengthscale for layer in model.layers])
    per = np.array(
        [layer.kernel.period if layer.kernel.period is not None else 1.0
         for layer in model.layers]
    )
    meanv = np.array(
        [_MEAN_CODES[layer.mean_fn.variant] for layer in model.layers], dtype=np.int64
    )
    z = np.stack([np.asarray(layer.z, dtype=float) for layer in model.layers])
    return fams, var, gam, per, meanv, z


def as_inputs(x, name="x"):
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 1-d array")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def check_finite_rows(e_rows, kls, draws_by_layer=None, scheme=""):
    """Raise ElboEvaluationError naming the first degenerate layer."""
    if np.all(np.isfinite(e_rows)) and np.all(np.isfinite(kls)):
        return
    layer = None
    if draws_by_layer is not None:
        for ell, f in enumerate(draws_by_layer):
            if not np.all(np.isfinite(f)):
                layer = ell
                break
    if layer is None:
        bad_kl = np.flatnonzero(~np.isfinite(np.atleast_1d(kls)))
        if bad_kl.size:
            layer = int(bad_kl[0])
    where = f"layer {layer}" if layer is not None else "an unidentified layer"
    raise ElboEvaluationError(
        f"{scheme} ELBO is non-finite; moments degenerated at {where}",
        layer_index=layer,
    )


def standardise_rows(eps):
    """Shift/scale noise so each point has exact zero mean and unit second
    moment across the sample axis (axis 0). Used only inside training."""
    mu = eps.mean(axis=0, keepdims=True)
    centred = eps - mu
    scale = np.sqrt(np.mean(centred**2, axis=0, keepdims=True))
    return centred / np.where(scale > 0.0, scale, 1.0)

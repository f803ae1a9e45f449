"""Result containers shared by the variational schemes."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ElboEstimate:
    """Monte-Carlo ELBO value with its per-term breakdown.

    value = expectation_term - kl_term; expectation_se is the Monte-Carlo
    standard error of the expectation term (the KL term is deterministic
    for the inducing-point schemes and itself sampled for the chained one).
    """

    value: float
    expectation_term: float
    kl_term: float
    expectation_se: float
    kl_per_layer: np.ndarray
    n_samples: int
    n_inner: int | None = None

    def __post_init__(self):
        self.kl_per_layer = np.asarray(self.kl_per_layer, dtype=float)


@dataclass
class SampleSet:
    """Per-layer function draws over a query grid.

    draws has shape (L, n_samples, len(inputs)); draws[l, s] is sample s of
    layer l+1 evaluated at every query input.
    """

    inputs: np.ndarray
    draws: np.ndarray
    scheme: str
    seed: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1)
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3 or self.draws.shape[2] != self.inputs.shape[0]:
            raise ValueError(
                f"draws shape {self.draws.shape} does not match {self.inputs.shape[0]} inputs"
            )

    @property
    def n_layers(self):
        return self.draws.shape[0]

    @property
    def n_samples(self):
        return self.draws.shape[1]

    def layer_marginal_variance(self, layer_index):
        """Per-input sample variance of one layer's draws (0-based index)."""
        return np.var(self.draws[layer_index], axis=0, ddof=1)

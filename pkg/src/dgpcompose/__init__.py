"""Deep Gaussian process inference with three variational schemes and a
compositional-uncertainty diagnostics suite."""

__version__ = "0.1.0"

from ._backend import available_backends, backend_name
from ._scheme_common import ElboEvaluationError
from .config import ConfigError, RunConfig, load_config
from .diagnostics import (
    counterexample_eval,
    counterexample_flag,
    layer_variance_probe,
    noisy_input_expansion,
    second_derivative_scan,
)
from .experiments import (
    DatasetSpec,
    ReplicationReport,
    generate_dataset,
    run_replication,
    sample_layers,
)
from .gp_layers import DgpModelSpec, GPLayerSpec, MeanFnSpec, default_mean_fns
from .math_core import (
    InvalidInputError,
    KernelSpec,
    MvnMoments,
    NotPsdError,
    RngHandle,
)
from .results import ElboEstimate, SampleSet
from .vi_chained_inducing import (
    ChainedInducingState,
    OpCounters,
    elbo_chained,
    init_chained,
    predict_chained,
    sample_layers_chained,
)
from .vi_joint_gaussian import (
    ChainGaussianState,
    elbo_jg_analytic,
    elbo_jg_sampled,
    init_joint_gaussian,
    kl_chain,
    marginalised_conditional_chain,
    sample_layers_jg,
    sample_u_joint,
)
from .training import TrainingDivergedError, fit
from .vi_meanfield import MeanFieldState, elbo_mf, init_meanfield, sample_layers_mf

__all__ = [
    "ChainGaussianState",
    "ChainedInducingState",
    "ConfigError",
    "DatasetSpec",
    "DgpModelSpec",
    "ElboEstimate",
    "ElboEvaluationError",
    "GPLayerSpec",
    "InvalidInputError",
    "KernelSpec",
    "MeanFieldState",
    "MeanFnSpec",
    "MvnMoments",
    "NotPsdError",
    "OpCounters",
    "ReplicationReport",
    "RngHandle",
    "RunConfig",
    "SampleSet",
    "TrainingDivergedError",
    "available_backends",
    "backend_name",
    "counterexample_eval",
    "counterexample_flag",
    "default_mean_fns",
    "elbo_chained",
    "elbo_jg_analytic",
    "elbo_jg_sampled",
    "elbo_mf",
    "fit",
    "generate_dataset",
    "init_chained",
    "init_joint_gaussian",
    "init_meanfield",
    "kl_chain",
    "layer_variance_probe",
    "load_config",
    "marginalised_conditional_chain",
    "noisy_input_expansion",
    "predict_chained",
    "run_replication",
    "sample_layers",
    "sample_layers_chained",
    "sample_layers_jg",
    "sample_layers_mf",
    "sample_u_joint",
    "second_derivative_scan",
]

"""Gaussian-process inference with the tangent kernels of trained networks."""

from .adapt import (
    AdaptConfig,
    SinusoidExperimentConfig,
    SinusoidTaskSpec,
    adapt_task,
    baseline_last_layer,
    baseline_no_retrain,
    run_adaptation,
    sample_sinusoid_tasks,
    sinusoid_experiment,
    split_task,
    stratified_split,
)
from .analysis import StudyConfig, jacobian_similarity, jacobian_spectrum, task_similarity_study
from .errors import (
    ConfigError,
    ContractViolationError,
    FitError,
    NumericBreakdownError,
    ResourceLimitError,
    TangentGpError,
    TrainingDivergenceError,
)
from .fisher import (
    CategoricalLikelihood,
    GaussianLikelihood,
    exact_fvp,
    fd_fvp,
    fisher_operator,
    fvp_error_sweep,
)
from .glm import (
    ClassificationData,
    GlmFitConfig,
    LinearizedGlm,
    fit_laplace,
    fit_map,
    fit_svi,
    predict_class,
    zero_coefficients_glm,
)
from .gp import (
    NtkPosterior,
    fit_posterior,
    kernel_matrix,
    load_posterior,
    log_marginal_likelihood,
    predict,
    save_posterior,
)
from .linalg import SymmetricLinearOperator, cg_solve, lanczos_factorize, lowrank_inverse_root
from .net import (
    JacobianOperator,
    MlpArchitecture,
    MlpNetwork,
    OptimizerConfig,
    TaskDataset,
    forward,
    init_network,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "CategoricalLikelihood",
    "ClassificationData",
    "ConfigError",
    "ContractViolationError",
    "FitError",
    "GaussianLikelihood",
    "GlmFitConfig",
    "JacobianOperator",
    "LinearizedGlm",
    "MlpArchitecture",
    "MlpNetwork",
    "NtkPosterior",
    "NumericBreakdownError",
    "OptimizerConfig",
    "ResourceLimitError",
    "SinusoidExperimentConfig",
    "SinusoidTaskSpec",
    "StudyConfig",
    "SymmetricLinearOperator",
    "TangentGpError",
    "TaskDataset",
    "TrainingDivergenceError",
    "adapt_task",
    "baseline_last_layer",
    "baseline_no_retrain",
    "cg_solve",
    "exact_fvp",
    "fd_fvp",
    "fisher_operator",
    "fit_laplace",
    "fit_map",
    "fit_posterior",
    "fit_svi",
    "forward",
    "fvp_error_sweep",
    "init_network",
    "jacobian_similarity",
    "jacobian_spectrum",
    "kernel_matrix",
    "lanczos_factorize",
    "load_posterior",
    "log_marginal_likelihood",
    "lowrank_inverse_root",
    "predict",
    "predict_class",
    "run_adaptation",
    "sample_sinusoid_tasks",
    "save_posterior",
    "sinusoid_experiment",
    "split_task",
    "stratified_split",
    "task_similarity_study",
    "train",
    "zero_coefficients_glm",
]

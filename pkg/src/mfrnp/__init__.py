"""Multi-fidelity residual neural processes (MFRNP) for PDE surrogate modeling."""

from mfrnp.errors import (
    ConfigurationError,
    InputError,
    MetricError,
    MFRNPError,
    StateError,
    TrainingError,
)
from mfrnp.multifidelity import (
    MFModel,
    TrainConfig,
    aggregate,
    interpolate_grid,
    load_model,
    mfrnp_loss,
    predict,
    save_model,
    train,
)
from mfrnp.neural_process import NPSurrogate, gaussian_kl, gaussian_loglik, np_elbo
from mfrnp.pde import FidelityDataset, FidelitySpec, GridField, SamplingScope, solve_heat, solve_poisson

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "FidelityDataset",
    "FidelitySpec",
    "GridField",
    "InputError",
    "MFModel",
    "MFRNPError",
    "MetricError",
    "NPSurrogate",
    "SamplingScope",
    "StateError",
    "TrainConfig",
    "TrainingError",
    "aggregate",
    "gaussian_kl",
    "gaussian_loglik",
    "interpolate_grid",
    "load_model",
    "mfrnp_loss",
    "np_elbo",
    "predict",
    "save_model",
    "solve_heat",
    "solve_poisson",
    "train",
]

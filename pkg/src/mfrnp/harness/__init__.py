from mfrnp.harness.config import ExperimentConfig, build_config
from mfrnp.harness.experiment import RunReport, run_experiment, run_seeds
from mfrnp.harness.metrics import lat_weighted_nrmse, nrmse

__all__ = [
    "ExperimentConfig",
    "RunReport",
    "build_config",
    "lat_weighted_nrmse",
    "nrmse",
    "run_experiment",
    "run_seeds",
]

"""Grid and Monte Carlo tools for a truncated nonlinear filter of a scalar diffusion
observed in white noise, with checks for its forgetting of the initial condition."""

from .config import ExperimentConfig, ModelConfig, load_config, parse_config_text
from .path_sim import DriftSpec, ObservationPath, simulate_paths
from .likelihood import BlockCoefficients, TransitionSpec, block_coefficients, psi_hat_eval
from .robust_filter import GridMeasure, TruncationGeometry, truncation_geometry

__all__ = [
    "BlockCoefficients",
    "DriftSpec",
    "ExperimentConfig",
    "GridMeasure",
    "ModelConfig",
    "ObservationPath",
    "TransitionSpec",
    "TruncationGeometry",
    "block_coefficients",
    "load_config",
    "parse_config_text",
    "psi_hat_eval",
    "simulate_paths",
    "truncation_geometry",
]

__version__ = "0.1.0"

"""Configuration, synthetic data, the adaptive loop, file output and the CLI."""

from .adaptive import ReconstructionState, export_state, reconstruct_adaptive
from .config import ExperimentConfig, parse_config, parse_text
from .synthetic import GaussianInclusion, PulseSource, generate_synthetic_data, relative_l2_error

__all__ = [
    "ReconstructionState", "export_state", "reconstruct_adaptive",
    "ExperimentConfig", "parse_config", "parse_text",
    "GaussianInclusion", "PulseSource", "generate_synthetic_data", "relative_l2_error",
]

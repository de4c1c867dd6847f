"""Deterministic simulator of federated DDPM training with partial-model exchange."""
from .data import Dataset, PartitionSpec, load_idx, make_partition, synthetic_fashion
from .diffusion import build_schedule, ddpm_sample, q_sample, simple_loss
from .errors import ConfigurationError, IngestionError, NumericError
from .evaluation import FeatureExtractor, fit_stats, frechet_distance, score_model
from .federation import FederationConfig, expected_traffic, run_training, simulate_traffic
from .model import ModelConfig, build_denoiser, segment_layout

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "Dataset", "FeatureExtractor", "FederationConfig", "IngestionError", "ModelConfig",
    "NumericError", "PartitionSpec", "build_denoiser", "build_schedule", "ddpm_sample", "expected_traffic",
    "fit_stats", "frechet_distance", "load_idx", "make_partition", "q_sample", "run_training", "score_model",
    "segment_layout", "simple_loss", "simulate_traffic", "synthetic_fashion",
]

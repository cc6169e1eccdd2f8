"""From-scratch feed-forward detector: layers, networks, training, model files."""

from .layers import LayerSpec, featurize
from .modelio import ModelFormatError, load_into, load_model, read_model_header, save_model
from .network import ARCHS, Network, build_network, expected_param_count, infer_active_users
from .training import TrainConfig, TrainingDiverged, TrainingTrace, train

__all__ = [
    "ARCHS",
    "LayerSpec",
    "ModelFormatError",
    "Network",
    "TrainConfig",
    "TrainingDiverged",
    "TrainingTrace",
    "build_network",
    "expected_param_count",
    "featurize",
    "infer_active_users",
    "load_into",
    "load_model",
    "read_model_header",
    "save_model",
    "train",
]

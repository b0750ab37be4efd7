from .layers import LayerSpec
from .model_io import load_model, save_model
from .network import (
    Network,
    accuracy,
    build_network,
    features,
    forward,
    input_gradient,
    predict,
    reference_layers,
    reference_network,
)
from .train import TrainConfig, train

__all__ = [
    "LayerSpec", "Network", "TrainConfig",
    "accuracy", "build_network", "features", "forward", "input_gradient",
    "load_model", "predict", "reference_layers", "reference_network",
    "save_model", "train",
]

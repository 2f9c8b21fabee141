from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .tensor import GraphError, Parameter, Tensor
from .unet import DESK_PRESET, FULL_PRESET, UNetConfig, UNetModel, backward, init_parameters

__all__ = [
    "CheckpointError",
    "DESK_PRESET",
    "GraphError",
    "FULL_PRESET",
    "Parameter",
    "Tensor",
    "UNetConfig",
    "UNetModel",
    "backward",
    "init_parameters",
    "load_checkpoint",
    "save_checkpoint",
]

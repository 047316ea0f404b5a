"""Sharpness-aware multimodal training with cross-modality gradient modification."""

__version__ = "0.1.0"

from .data import MultimodalDataset, SyntheticSpec, generate, load_dataset, save_dataset
from .errors import DataFormatError, MieError, NumericError, ValidationError
from .gradmod import GmConfig
from .nn import ModalityModel, init_model, load_model, save_model
from .sam import SamConfig
from .trainer import AblationCell, AblationGrid, AblationSwitches, TrainConfig, ablate, train

__all__ = [
    "AblationCell",
    "AblationGrid",
    "AblationSwitches",
    "DataFormatError",
    "GmConfig",
    "MieError",
    "ModalityModel",
    "MultimodalDataset",
    "NumericError",
    "SamConfig",
    "SyntheticSpec",
    "TrainConfig",
    "ValidationError",
    "__version__",
    "ablate",
    "generate",
    "init_model",
    "load_dataset",
    "load_model",
    "save_dataset",
    "save_model",
    "train",
]

"""Cross-path consistency training for set-prediction HOI transformers, in numpy."""
from ._kernels import BACKEND
from .data import Scene, GtTriplet, generate_dataset, read_dataset, write_dataset
from .engine import Checkpoint, TrainConfig, ablate, evaluate_map, load_checkpoint, save_checkpoint, train
from .model import HOIModel, ModelConfig, PredictionSet
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Checkpoint", "GtTriplet", "HOIModel", "ModelConfig", "PredictionSet", "Scene",
    "Tape", "Tensor", "TrainConfig", "ablate", "evaluate_map", "generate_dataset", "load_checkpoint",
    "read_dataset", "save_checkpoint", "train", "write_dataset",
]

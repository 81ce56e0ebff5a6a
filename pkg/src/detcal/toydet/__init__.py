"""Desk-scale dense detector trained on synthetic scenes."""
from .data import SyntheticScene, Targets, assign_positives, generate_dataset
from .model import ToyDetector, mc_forward
from .train import TrainConfig, TrainingDiverged, evaluate, infer, task_loss, train

__all__ = [
    "SyntheticScene",
    "Targets",
    "assign_positives",
    "generate_dataset",
    "ToyDetector",
    "mc_forward",
    "TrainConfig",
    "TrainingDiverged",
    "evaluate",
    "infer",
    "task_loss",
    "train",
]

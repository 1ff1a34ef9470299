from .checkpoint import load_checkpoint, save_checkpoint
from .config import EMBED_WAYS, ExperimentConfig
from .data import (
    MODALITIES,
    Dataset,
    Dialogue,
    GeneratorSpec,
    ValidationError,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .metrics import Metrics, compute_metrics, confusion_matrix, metrics_from_confusion
from .model import ContextEncoder, EmotionModel, assemble_model, context_encode
from .train import DivergenceError, TrainingLog, evaluate, train

__all__ = [
    "load_checkpoint",
    "save_checkpoint",
    "EMBED_WAYS",
    "ExperimentConfig",
    "MODALITIES",
    "Dataset",
    "Dialogue",
    "GeneratorSpec",
    "ValidationError",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "Metrics",
    "compute_metrics",
    "confusion_matrix",
    "metrics_from_confusion",
    "ContextEncoder",
    "EmotionModel",
    "assemble_model",
    "context_encode",
    "DivergenceError",
    "TrainingLog",
    "evaluate",
    "train",
]

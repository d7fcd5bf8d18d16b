"""Block shuffle and rotation transfer attacks on small convolutional classifiers."""
from .attacks import AttackConfig, TransferAttack, fgsm, make_config, run_attack
from .datasets import LabeledDataset, make_shapes
from .evaluation import (EvalReport, Heatmap, ablate, attack_success_rate, grad_cam, heatmap_consistency,
                         transfer_matrix)
from .exceptions import BsrError, CheckpointError, ConfigurationError, IngestionError, ShapeError
from .models import ConvClassifier, build, load, save, train
from .transforms import BlockShuffleRotation, BsrConfig, apply_bsr, backprop_bsr, sample_bsr

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "TransferAttack", "fgsm", "make_config", "run_attack",
    "LabeledDataset", "make_shapes",
    "EvalReport", "Heatmap", "ablate", "attack_success_rate", "grad_cam", "heatmap_consistency",
    "transfer_matrix",
    "BsrError", "CheckpointError", "ConfigurationError", "IngestionError", "ShapeError",
    "ConvClassifier", "build", "load", "save", "train",
    "BlockShuffleRotation", "BsrConfig", "apply_bsr", "backprop_bsr", "sample_bsr",
]

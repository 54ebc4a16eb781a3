"""MuVo: multi-view consistency training for semi-supervised domain adaptation.

Desk-scale implementation exercised on synthetic two-domain classification
tasks: debiased pseudo-labeling, pseudo-negative-label learning, strong-view
consistency, and cross-domain prototype affinity learning on top of a small
manually differentiated network.
"""

__version__ = "0.1.0"

from .affinity import AffinityConfig, PrototypeBank, SourceBank
from .augment import AugmentConfig
from .config import ExperimentConfig, load_config
from .data import DatasetSpec, TrainingData, generate, kshot_split
from .model import ModelState, OptimizerState, forward, init_model
from .pseudolabel import ConfidenceBank
from .trainer import MuVoTrainer, RunResult, TrainConfig, evaluate

__all__ = [
    "AffinityConfig", "AugmentConfig", "ConfidenceBank", "DatasetSpec",
    "ExperimentConfig", "ModelState", "MuVoTrainer", "OptimizerState",
    "PrototypeBank", "RunResult", "SourceBank", "TrainConfig", "TrainingData",
    "evaluate", "forward", "generate", "init_model", "kshot_split",
    "load_config", "__version__",
]

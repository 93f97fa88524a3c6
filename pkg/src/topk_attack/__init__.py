"""Adversarial perturbations for top-k multi-label predictors."""

from .attacks import (
    AttackConfig,
    AttackResult,
    Perturbation,
    UniversalResult,
    attack_mlap,
    attack_targeted,
    attack_universal,
    attack_untargeted,
    project_l2,
)
from .datakit import Dataset, generate_synthetic, load_dataset, save_dataset
from .errors import DatasetParseError, InvalidInputError, InvariantError, ParameterError, ShapeError
from .evaluation import LabelSet, TargetSet, asr, pert, select_targets, top_k_set, uasr
from .predictor import MlpModel, TrainConfig, load_model, save_model, train_victim

__version__ = "0.1.0"

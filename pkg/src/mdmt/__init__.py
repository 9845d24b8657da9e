"""Multi-domain multi-task CTR models on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor
from .config import TrainConfig, load_config
from .data import Dataset, FeatureSpace, Field, SyntheticSpec, generate_synthetic, load_interactions, split_dataset
from .kernels import BACKEND
from .metrics import EvalReport, auc, evaluate, logloss, rela_impr
from .model import HyperParams, MDMTModel
from .trainer import fit
from .variants import VariantKind, build_variant

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Dataset",
    "EvalReport",
    "FeatureSpace",
    "Field",
    "HyperParams",
    "MDMTModel",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "VariantKind",
    "auc",
    "build_variant",
    "evaluate",
    "fit",
    "generate_synthetic",
    "load_config",
    "load_interactions",
    "logloss",
    "rela_impr",
    "split_dataset",
]

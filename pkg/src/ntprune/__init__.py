"""Non-transferable pruning: sparsify a classifier so that it stays accurate on
its source domain while becoming a poor starting point for a target domain."""
from .admm import ADMMConfig, PruneResult, run_ntp, soft_threshold
from .baselines import MagnitudePruneConfig, one_shot_magnitude_prune
from .config import ConfigError, ExperimentConfig
from .datasets import (DomainDataset, SubsetSpec, SyntheticPairConfig, generate_synthetic_domain_pair,
                       load_image_domain, log_spaced_sizes, stratified_subset, train_test_split)
from .model import SparsityMask, SplitClassifier, build_model, load_checkpoint, save_checkpoint
from .objective import NTPLossConfig, fisher_regularizer, ntp_loss
from .transferability import FineTuneConfig, LearningCurve, SLCResult, build_slc, finetune, slc, slc_auc, train_scratch

__version__ = "0.1.0"

__all__ = [
    "ADMMConfig", "ConfigError", "DomainDataset", "ExperimentConfig", "FineTuneConfig", "LearningCurve",
    "MagnitudePruneConfig", "NTPLossConfig", "PruneResult", "SLCResult", "SparsityMask", "SplitClassifier",
    "SubsetSpec", "SyntheticPairConfig", "build_model", "build_slc", "finetune", "fisher_regularizer",
    "generate_synthetic_domain_pair", "load_checkpoint", "load_image_domain", "log_spaced_sizes", "ntp_loss",
    "one_shot_magnitude_prune", "run_ntp", "save_checkpoint", "slc", "slc_auc", "soft_threshold",
    "stratified_subset", "train_scratch", "train_test_split",
]

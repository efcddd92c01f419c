"""Robustness and feature-attribution probes for multi-label triplet recognizers."""

from .autodiff import Tensor, backward, finite_diff_check
from .datasets import (Dataset, Example, SyntheticConfig, generate_synthetic,
                       kfold_split, load_frames_dir, sample_attack_set, save_frames_dir)
from .estimator import (GradSaliency, IntegratedGradients, MinNormAttack,
                        TripletNetClassifier)
from .explain import (AttributionMap, FeatureMask, cam, grad_saliency,
                      integrated_gradients, top_fraction_mask)
from .metrics import average_precision, component_ap, crossval_summary, mean_ap_ivt
from .model import (LinearModel, ModelConfig, TripletNet, load_checkpoint,
                    save_checkpoint)
from .robustness import (AttackConfig, GridConfig, RobustnessRecord, brute_force_epsilon,
                         min_norm_attack, robustness_curve, robustness_eval)
from .training import (AdversarialTrainConfig, TrainConfig, adversarial_fit,
                       multilabel_loss, sgd_fit)
from .triplets import TripletTable, build_table, component_logits, load_table, project

__version__ = "0.1.0"

__all__ = [
    "AdversarialTrainConfig", "AttackConfig", "AttributionMap", "Dataset", "Example",
    "FeatureMask", "GradSaliency", "GridConfig", "IntegratedGradients", "LinearModel",
    "MinNormAttack", "ModelConfig", "RobustnessRecord", "SyntheticConfig", "Tensor",
    "TrainConfig", "TripletNet", "TripletNetClassifier", "TripletTable",
    "adversarial_fit", "average_precision", "backward", "brute_force_epsilon",
    "build_table", "cam", "component_ap", "component_logits", "crossval_summary",
    "finite_diff_check", "generate_synthetic", "grad_saliency", "integrated_gradients",
    "kfold_split", "load_checkpoint", "load_frames_dir", "load_table", "mean_ap_ivt",
    "min_norm_attack", "multilabel_loss", "project", "robustness_curve",
    "robustness_eval", "sample_attack_set", "save_checkpoint", "save_frames_dir",
    "sgd_fit", "top_fraction_mask",
]

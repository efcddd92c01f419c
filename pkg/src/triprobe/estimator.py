"""Scikit-learn style wrappers around the functional core.

TripletNetClassifier exposes the reference model through fit / predict /
decision_function / score so it composes with sklearn tooling (clone,
get_params, CV utilities).  GradSaliency and IntegratedGradients are
transformer-shaped: transform(X) returns one attribution map per input.
MinNormAttack wraps the masked minimum-norm search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import metrics
from .explain import grad_saliency_batch, integrated_gradients_batch
from .model import ModelConfig, TripletNet
from .robustness import AttackConfig, min_norm_attack
from .training import AdversarialTrainConfig, TrainConfig, adversarial_fit, sgd_fit
from .triplets import TripletTable, full_product_table
from .validation import check_fitted, check_images, check_multilabel


class TripletNetClassifier(BaseEstimator):
    """Multi-label triplet recognizer with per-part SGD training.

    Parameters mirror the model/training configs; `table` fixes the label
    space (defaults to a small full product space when omitted).  After
    fit: `net_` (trained network), `history_` (per-epoch stats),
    `classes_`, and `n_features_in_`.
    """

    def __init__(self, table=None, image_height=64, image_width=112,
                 conv_widths=(8, 16, 32), branch_width=16, epochs=12, batch_size=32,
                 lr_backbone=1e-2, lr_encoder=1e-2, lr_decoder=1e-2, schedule="linear",
                 decay=0.9, loss_weights=(1.0, 1.0, 1.0, 1.0), val_fraction=0.15,
                 adv_radius=None, adv_norm="inf", adv_steps=5, seed=0):
        self.table = table
        self.image_height = image_height
        self.image_width = image_width
        self.conv_widths = conv_widths
        self.branch_width = branch_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_backbone = lr_backbone
        self.lr_encoder = lr_encoder
        self.lr_decoder = lr_decoder
        self.schedule = schedule
        self.decay = decay
        self.loss_weights = loss_weights
        self.val_fraction = val_fraction
        self.adv_radius = adv_radius
        self.adv_norm = adv_norm
        self.adv_steps = adv_steps
        self.seed = seed

    def _resolved_table(self) -> TripletTable:
        if self.table is None:
            return full_product_table(3, 2, 3)
        return self.table

    def _model_config(self, table: TripletTable) -> ModelConfig:
        return ModelConfig(
            height=self.image_height, width=self.image_width,
            conv_widths=tuple(self.conv_widths), branch_width=self.branch_width,
            n_instruments=table.n_instruments, n_verbs=table.n_verbs,
            n_targets=table.n_targets, n_triplets=table.n_triplets,
            init_seed=self.seed)

    def fit(self, X, y, X_val=None, y_val=None):
        table = self._resolved_table()
        X = check_images(X, (self.image_height, self.image_width))
        y = check_multilabel(y, table.n_triplets, X.shape[0])
        config = self._model_config(table)
        common = dict(
            epochs=self.epochs, batch_size=self.batch_size,
            lr_backbone=self.lr_backbone, lr_encoder=self.lr_encoder,
            lr_decoder=self.lr_decoder, schedule=self.schedule, decay=self.decay,
            loss_weights=tuple(self.loss_weights), val_fraction=self.val_fraction,
            seed=self.seed)
        net = TripletNet(config)
        if self.adv_radius is None:
            result = sgd_fit(net.params, config, table, X, y,
                             TrainConfig(**common), X_val, y_val)
        else:
            adv = AdversarialTrainConfig(**common, radius=self.adv_radius,
                                         norm=self.adv_norm, inner_steps=self.adv_steps)
            result = adversarial_fit(net.params, config, table, X, y, adv, X_val, y_val)
        self.table_ = table
        self.config_ = config
        self.net_ = TripletNet(config, result.params)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(table.n_triplets)
        self.n_features_in_ = X.shape[1] * X.shape[2] * X.shape[3]
        return self

    def decision_function(self, X) -> np.ndarray:
        net = check_fitted(self)
        X = check_images(X, (self.image_height, self.image_width))
        from .training import evaluate_logits

        return evaluate_logits(net.params, net.config, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, X) -> np.ndarray:
        """Index of the highest triplet logit per sample (ties: lowest index)."""
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y) -> float:
        """Mean average precision over triplet classes with positives."""
        y = check_multilabel(y, self._resolved_table().n_triplets)
        return metrics.mean_ap_ivt(self.decision_function(X), y)


class _AttributionTransformer(BaseEstimator):
    def __init__(self, model=None):
        self.model = model

    def _net(self):
        if self.model is None:
            raise RuntimeError(f"{type(self).__name__} needs a fitted model")
        return self.model.net_ if hasattr(self.model, "net_") else self.model

    def fit(self, X=None, y=None):
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform(X, y)


class GradSaliency(_AttributionTransformer):
    """Per-pixel |input gradient| of a triplet logit, summed over channels.

    transform(X, targets) returns (n, H, W) maps; targets default to the
    model's predictions.
    """

    def __init__(self, model=None, aggregate="abs_sum"):
        super().__init__(model)
        self.aggregate = aggregate

    def transform(self, X, targets=None) -> np.ndarray:
        return grad_saliency_batch(self._net(), np.asarray(X), targets, self.aggregate)


class IntegratedGradients(_AttributionTransformer):
    """Path-integrated gradients from a baseline (all-black by default)."""

    def __init__(self, model=None, steps=32, baseline=None, aggregate="abs_sum"):
        super().__init__(model)
        self.steps = steps
        self.baseline = baseline
        self.aggregate = aggregate

    def transform(self, X, targets=None) -> np.ndarray:
        return integrated_gradients_batch(self._net(), np.asarray(X), targets,
                                          baseline=self.baseline, steps=self.steps,
                                          aggregate=self.aggregate)


class MinNormAttack(BaseEstimator):
    """Masked minimum-norm prediction-flip search with sklearn-style params."""

    def __init__(self, model=None, norm=2, eps_max=16.0, tol=0.05, steps=40,
                 restarts=3, clip_pixels=False, seed=0):
        self.model = model
        self.norm = norm
        self.eps_max = eps_max
        self.tol = tol
        self.steps = steps
        self.restarts = restarts
        self.clip_pixels = clip_pixels
        self.seed = seed

    def _config(self) -> AttackConfig:
        return AttackConfig(norm=self.norm, eps_max=self.eps_max, tol=self.tol,
                            steps=self.steps, restarts=self.restarts,
                            clip_pixels=self.clip_pixels, seed=self.seed)

    def _net(self):
        if self.model is None:
            raise RuntimeError("MinNormAttack needs a model")
        return self.model.net_ if hasattr(self.model, "net_") else self.model

    def run(self, x, y, mask):
        return min_norm_attack(self._net(), x, int(y), mask, self._config())

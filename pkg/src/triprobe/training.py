"""SGD training loops, clean and adversarial, for the reference model.

The loss is a weighted sum of per-head sigmoid binary cross-entropies
(IVT, I, V, T); component targets are ORs of the triplet labels over each
projection preimage.  Learning rates are per part (backbone / encoder /
decoder) with a linear or exponential epoch schedule, configurable per
part.  Adversarial fitting solves the inner maximisation by projected
gradient ascent on the loss inside the perturbation ball; a zero radius
reduces to the clean path exactly (same arithmetic, same rng stream).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, forward, param_group
from .triplets import TripletTable, project_labels

PARTS = ("backbone", "encoder", "decoder")
HEADS = ("IVT", "I", "V", "T")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimisation."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr_backbone: float = 1e-2
    lr_encoder: float = 1e-2
    lr_decoder: float = 1e-2
    schedule: str = "linear"  # "linear" or "exponential", or per-part dict
    decay: float = 0.9  # gamma for the exponential schedule
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # IVT, I, V, T
    val_fraction: float = 0.15  # used when no explicit validation split is given
    val_metric: str = "ap_ivt"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for part in PARTS:
            if getattr(self, f"lr_{part}") < 0:
                raise ValueError("learning rates must be >= 0")

    def lr_at(self, part: str, epoch: int) -> float:
        lr0 = getattr(self, f"lr_{part}")
        kind = self.schedule[part] if isinstance(self.schedule, dict) else self.schedule
        if kind == "linear":
            return lr0 * (1.0 - epoch / self.epochs)
        if kind == "exponential":
            return lr0 * self.decay ** epoch
        raise ValueError(f"unknown schedule {kind!r}")


@dataclass(frozen=True)
class AdversarialTrainConfig(TrainConfig):
    radius: float = 0.05
    norm: float | str = "inf"  # "inf" or 2
    inner_steps: int = 5
    inner_step_size: float | None = None  # default 2.5 * radius / inner_steps

    def __post_init__(self):
        super().__post_init__()
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.norm not in (2, 2.0, "inf", float("inf")):
            raise ValueError("norm must be 2 or 'inf'")


@dataclass
class EpochStats:
    epoch: int
    lr: float  # backbone lr; the other parts are recorded alongside
    lr_encoder: float
    lr_decoder: float
    train_loss: float
    val_loss: float
    val_ap_ivt: float
    train_loss_adv: float | None = None


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_epoch: int = -1


def multilabel_loss(output, labels: np.ndarray, table: TripletTable,
                    weights=(1.0, 1.0, 1.0, 1.0)) -> ad.Tensor:
    """Weighted sum of per-head mean BCEs; labels are binary triplet rows."""
    labels = np.asarray(labels)
    terms = []
    for head, w in zip(HEADS, weights):
        target = labels if head == "IVT" else project_labels(labels, table, head)
        term = ad.reduce_mean(ad.bce_with_logits(output.head(head), target))
        terms.append(ad.scale(term, float(w)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _bce_np(z, t):
    return np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))


def loss_per_example(heads: dict, labels: np.ndarray, table: TripletTable,
                     weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Tape-free per-example loss, used by the inner-max acceptance guard."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape[0], dtype=np.float64)
    for head, w in zip(HEADS, weights):
        target = labels if head == "IVT" else project_labels(labels, table, head)
        out += w * _bce_np(heads[head].astype(np.float64), target).mean(axis=1)
    return out


def _heads_np(params, X, config):
    out = forward(params, X, config)
    return {h: out.head(h).data for h in HEADS}


def inner_max_perturbation(params, config: ModelConfig, table: TripletTable, X, Y,
                           adv: AdversarialTrainConfig) -> np.ndarray:
    """Projected gradient ascent on the loss inside the perturbation ball.

    Starts at delta = 0; the returned delta never does worse than zero
    (per example), so the ascent is monotone in the recorded loss.
    """
    if adv.radius == 0:
        return np.zeros_like(X)
    r = adv.radius
    alpha = adv.inner_step_size if adv.inner_step_size is not None else 2.5 * r / adv.inner_steps
    linf = adv.norm in ("inf", float("inf"))
    delta = np.zeros_like(X)
    for _ in range(adv.inner_steps):
        out = forward(params, X + delta, config, requires_input_grad=True)
        loss = multilabel_loss(out, Y, table, adv.loss_weights)
        ad.backward(loss)
        g = out.x.grad
        if linf:
            delta = delta + alpha * np.sign(g)
            delta = np.clip(delta, -r, r)
        else:
            norms = np.sqrt((g.astype(np.float64) ** 2).sum(axis=(1, 2, 3), keepdims=True))
            delta = delta + alpha * g / np.maximum(norms, 1e-12).astype(g.dtype)
            dn = np.sqrt((delta.astype(np.float64) ** 2).sum(axis=(1, 2, 3), keepdims=True))
            delta = (delta * np.minimum(1.0, r / np.maximum(dn, 1e-12))).astype(X.dtype)
        delta = delta.astype(X.dtype)
    base = loss_per_example(_heads_np(params, X, config), Y, table, adv.loss_weights)
    pert = loss_per_example(_heads_np(params, X + delta, config), Y, table, adv.loss_weights)
    keep = pert >= base
    return np.where(keep[:, None, None, None], delta, 0.0).astype(X.dtype)


def evaluate_logits(params, config: ModelConfig, X, batch_size: int = 128) -> np.ndarray:
    """Forward the whole set in chunks without building gradient tape."""
    chunks = []
    for lo in range(0, X.shape[0], batch_size):
        chunks.append(forward(params, X[lo:lo + batch_size], config).y_ivt.data)
    return np.concatenate(chunks, axis=0)


def _validation_stats(params, config, table, X, Y, weights):
    from .metrics import mean_ap_ivt

    out_chunks, loss_sum = [], 0.0
    for lo in range(0, X.shape[0], 128):
        heads = _heads_np(params, X[lo:lo + 128], config)
        out_chunks.append(heads["IVT"])
        loss_sum += loss_per_example({k: v for k, v in heads.items()},
                                     Y[lo:lo + 128], table, weights).sum()
    scores = np.concatenate(out_chunks, axis=0)
    return loss_sum / X.shape[0], mean_ap_ivt(scores, Y)


def _fit(params, config: ModelConfig, table: TripletTable, X, Y, cfg: TrainConfig,
         X_val=None, Y_val=None, adv: AdversarialTrainConfig | None = None) -> TrainResult:
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float32))
    Y = np.asarray(Y)
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    if X_val is None and cfg.val_fraction > 0 and X.shape[0] >= 10:
        n_val = max(1, int(round(cfg.val_fraction * X.shape[0])))
        X_val, Y_val = X[-n_val:], Y[-n_val:]
        X, Y = X[:-n_val], Y[:-n_val]

    params = {k: v.copy() for k, v in params.items()}
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    adversarial = adv is not None and adv.radius > 0
    history = []
    best = (-math.inf, -1, None)

    for epoch in range(cfg.epochs):
        lrs = {part: cfg.lr_at(part, epoch) for part in PARTS}
        order = rng.permutation(X.shape[0])
        loss_sum = 0.0
        adv_loss_sum = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = X[idx], Y[idx]
            if adversarial:
                delta = inner_max_perturbation(params, config, table, xb, yb, adv)
                clean = loss_per_example(_heads_np(params, xb, config), yb, table,
                                         cfg.loss_weights).mean()
                loss_sum += float(clean) * idx.size
                xb = xb + delta
            try:
                out = forward(params, xb, config, requires_param_grad=True)
                loss = multilabel_loss(out, yb, table, cfg.loss_weights)
                ad.backward(loss)
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}: {exc}"
                ) from exc
            batch_loss = loss.item()
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch}, batch {lo // cfg.batch_size}")
            if adversarial:
                adv_loss_sum += batch_loss * idx.size
            else:
                loss_sum += batch_loss * idx.size
            for name, tensor in out.param_tensors.items():
                if tensor.grad is not None:
                    params[name] -= np.float32(lrs[param_group(name)]) * tensor.grad

        val_loss, val_ap = (math.nan, math.nan)
        if X_val is not None and X_val.shape[0]:
            val_loss, val_ap = _validation_stats(params, config, table, X_val, Y_val,
                                                 cfg.loss_weights)
        history.append(EpochStats(
            epoch=epoch, lr=lrs["backbone"], lr_encoder=lrs["encoder"],
            lr_decoder=lrs["decoder"], train_loss=loss_sum / X.shape[0],
            val_loss=float(val_loss), val_ap_ivt=float(val_ap),
            train_loss_adv=(adv_loss_sum / X.shape[0]) if adversarial else None))
        score = val_ap if not math.isnan(val_ap) else -history[-1].train_loss
        if score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in params.items()})

    final = best[2] if best[2] is not None else params
    return TrainResult(params=final, history=history, best_epoch=best[1])


def sgd_fit(params, config: ModelConfig, table: TripletTable, X, Y,
            cfg: TrainConfig, X_val=None, Y_val=None) -> TrainResult:
    """Plain SGD; returns the epoch checkpoint with the best validation AP."""
    return _fit(params, config, table, X, Y, cfg, X_val, Y_val, adv=None)


def adversarial_fit(params, config: ModelConfig, table: TripletTable, X, Y,
                    adv_cfg: AdversarialTrainConfig, X_val=None, Y_val=None) -> TrainResult:
    """SGD on the inner-maximised loss; radius 0 reproduces sgd_fit exactly."""
    return _fit(params, config, table, X, Y, adv_cfg, X_val, Y_val,
                adv=adv_cfg if adv_cfg.radius > 0 else None)

"""Multiple-instance training of the refinement network.

Each image is a bag.  Instance probabilities are max-pooled per class into
bag probabilities, scored with binary cross-entropy against the image-level
labels plus ``alpha`` times the co-occurrence term ``-p^T S p``, and the
network is updated by SGD, one bag per step, under cosine annealing.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cooccur import CooccurrenceMatrix, Variant
from .core import ImageDetections, ImageLabelVector
from .milnet import BagActivations, RefinementModel, forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    base_lr: float = 5e-3
    epochs: int = 50
    seed: int = 0
    s_variant: str = Variant.LITERAL.value
    clamp_eps: float = 1e-7
    momentum: float = 0.0
    schedule: str = "iteration"  # or "epoch"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.schedule not in ("iteration", "epoch"):
            raise ValueError("schedule must be 'iteration' or 'epoch'")
        Variant(self.s_variant)


@dataclass(frozen=True)
class BagProbability:
    p: np.ndarray  # (C,)
    argmax_instance: np.ndarray  # (C,) int


def aggregate_maxpool(activations: BagActivations | np.ndarray) -> BagProbability:
    """Per-class max over instances; ties go to the lowest instance index."""
    probs = activations.probs if isinstance(activations, BagActivations) else np.asarray(activations)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("max-pooling needs at least one instance")
    idx = probs.argmax(axis=0)  # numpy argmax returns the first maximum
    return BagProbability(p=probs[idx, np.arange(probs.shape[1])], argmax_instance=idx)


def route_to_instances(bag_p: BagProbability, grad_p: np.ndarray, num_instances: int) -> np.ndarray:
    """Scatter d(loss)/d(bag prob) onto the instance that won each max."""
    out = np.zeros((num_instances, len(bag_p.p)))
    out[bag_p.argmax_instance, np.arange(len(bag_p.p))] = grad_p
    return out


def _as_p(bag_p) -> np.ndarray:
    return bag_p.p if isinstance(bag_p, BagProbability) else np.asarray(bag_p, dtype=np.float64)


def bce_loss(bag_p, label, clamp_eps: float = 1e-7) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy and its gradient w.r.t. the bag probabilities.

    Probabilities are clamped to ``[eps, 1-eps]``; the gradient is zero where
    the clamp is active.
    """
    p = _as_p(bag_p)
    y = label.as_array() if isinstance(label, ImageLabelVector) else np.asarray(label, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"label length {y.shape} does not match probabilities {p.shape}")
    pc = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    loss = -float(np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    inside = (p >= clamp_eps) & (p <= 1.0 - clamp_eps)
    grad = np.where(inside, -y / pc + (1.0 - y) / (1.0 - pc), 0.0)
    return loss, grad


def _as_S(S) -> np.ndarray:
    return S.S if isinstance(S, CooccurrenceMatrix) else np.asarray(S, dtype=np.float64)


def cooccurrence_loss(bag_p, S) -> tuple[float, np.ndarray]:
    """``-p^T S p`` and its gradient ``-(S + S^T) p``."""
    p = _as_p(bag_p)
    S = _as_S(S)
    if S.shape != (len(p), len(p)):
        raise ValueError(f"S has shape {S.shape}, expected {(len(p), len(p))}")
    loss = -float(p @ S @ p)
    return loss, -(S + S.T) @ p


@dataclass(frozen=True)
class LossTerms:
    total: float
    bce: float
    co: float
    grad: np.ndarray


def total_loss(bag_p, label, S, alpha: float, clamp_eps: float = 1e-7) -> LossTerms:
    l_ce, g_ce = bce_loss(bag_p, label, clamp_eps)
    if alpha == 0:
        # exact pure-BCE path; the co-occurrence term is not even evaluated
        return LossTerms(l_ce, l_ce, 0.0, g_ce)
    l_co, g_co = cooccurrence_loss(bag_p, S)
    return LossTerms(l_ce + alpha * l_co, l_ce, l_co, g_ce + alpha * g_co)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def bag_loss(model: RefinementModel, features: np.ndarray, label, S, alpha: float,
             clamp_eps: float = 1e-7) -> float:
    """Scalar loss of one bag (no gradients); used by finite-difference checks."""
    bag_p = aggregate_maxpool(forward(model, features))
    return total_loss(bag_p, label, S, alpha, clamp_eps).total


def bag_step_gradients(model: RefinementModel, features: np.ndarray, label, S, alpha: float,
                       clamp_eps: float = 1e-7) -> LossTerms:
    """Forward, loss, and backward for one bag; gradients accumulate in ``model.grads``."""
    acts = forward(model, features)
    bag_p = aggregate_maxpool(acts)
    terms = total_loss(bag_p, label, S, alpha, clamp_eps)
    model.backward(acts, route_to_instances(bag_p, terms.grad, acts.num_instances))
    return terms


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_bce: float
    mean_co: float
    lr: float  # learning rate of the last step in the epoch
    steps: int


@dataclass
class TrainResult:
    model: RefinementModel
    log: list[EpochRecord] = field(default_factory=list)
    skipped_empty: int = 0

    @property
    def total_steps(self) -> int:
        return sum(r.steps for r in self.log)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss", "mean_bce", "mean_co", "lr"])
            for r in self.log:
                w.writerow([r.epoch, repr(r.mean_loss), repr(r.mean_bce), repr(r.mean_co), repr(r.lr)])


def pair_bags(
    detections: Sequence[ImageDetections], labels: Sequence[ImageLabelVector]
) -> list[tuple[ImageDetections, ImageLabelVector]]:
    """Match detections to labels by image_id, keeping detection order."""
    by_id = {lab.image_id: lab for lab in labels}
    missing = [d.image_id for d in detections if d.image_id not in by_id]
    if missing:
        raise ValueError(f"{len(missing)} images have no label vector, e.g. {missing[0]!r}")
    return [(d, by_id[d.image_id]) for d in detections]


def train(
    model: RefinementModel,
    weak_set: Sequence[tuple[ImageDetections, ImageLabelVector]],
    S,
    config: TrainConfig,
) -> TrainResult:
    """Train ``model`` in place and return it with a per-epoch loss log."""
    bags = []
    skipped = 0
    for det, lab in weak_set:
        if len(det) == 0:
            skipped += 1
            continue
        bags.append((det.image_id, det.feature_matrix(), lab.as_array()))
    if skipped:
        log.warning("skipping %d images with no proposals", skipped)
    if not bags:
        raise TrainingError("no non-empty bags to train on")
    S = _as_S(S)

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = len(bags)
    total_steps = config.epochs * steps_per_epoch
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()} if config.momentum else None
    result = TrainResult(model=model, skipped_empty=skipped)

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(steps_per_epoch)
        sums = np.zeros(3)
        lr = config.base_lr
        for i in order:
            image_id, X, y = bags[i]
            if config.schedule == "iteration":
                lr = cosine_lr(step, total_steps, config.base_lr)
            else:
                lr = cosine_lr(epoch, config.epochs, config.base_lr)
            model.zero_grad()
            terms = bag_step_gradients(model, X, y, S, config.alpha, config.clamp_eps)
            if not math.isfinite(terms.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, bag {image_id!r}")
            for name, param in model.params.items():
                grad = model.grads[name]
                if velocity is not None:
                    velocity[name] *= config.momentum
                    velocity[name] += grad
                    grad = velocity[name]
                param -= lr * grad
            sums += (terms.total, terms.bce, terms.co)
            step += 1
        if not model.all_finite():
            raise TrainingError(f"non-finite parameters after epoch {epoch}")
        mean = sums / steps_per_epoch
        result.log.append(EpochRecord(epoch, float(mean[0]), float(mean[1]), float(mean[2]), lr,
                                      steps_per_epoch))
        log.info("epoch %d loss %.6f bce %.6f co %.6f lr %.3g", epoch, *mean, lr)
    return result

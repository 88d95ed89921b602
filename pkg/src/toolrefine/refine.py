"""Rewrite the categories of teacher pseudo-labels with a trained model."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .core import DimensionError, ImageDetections
from .milnet import RefinementModel, forward

# refined records are ImageDetections whose proposals carry refined fields
RefinedDetections = ImageDetections


def refine_image(model: RefinementModel, det: ImageDetections, min_prob: float | None = None) -> ImageDetections:
    if len(det) == 0:
        return det
    X = det.feature_matrix()
    if X.shape[1] != model.config.feature_dim:
        raise DimensionError(
            f"image {det.image_id!r}: feature dim {X.shape[1]}, model expects {model.config.feature_dim}"
        )
    probs = forward(model, X).probs  # whole image at once so attention sees every proposal
    categories = probs.argmax(axis=1)
    proposals = []
    for p, row, k in zip(det.proposals, probs, categories):
        if min_prob is not None and row[k] < min_prob:
            continue
        proposals.append(replace(p, refined_category=int(k), refined_probs=tuple(float(v) for v in row)))
    return ImageDetections(det.image_id, tuple(proposals))


def refine_labels(
    model: RefinementModel,
    detections: Sequence[ImageDetections],
    min_prob: float | None = None,
) -> list[ImageDetections]:
    """Refine every image; boxes, objectness and order are passed through.

    ``min_prob`` optionally drops proposals whose refined class probability
    falls below it (off by default, and the only way boxes can disappear).
    """
    return [refine_image(model, det, min_prob) for det in detections]


def class_accuracy(detections: Sequence[ImageDetections], true_categories: Sequence[Sequence[int]]) -> float:
    """Fraction of proposals whose (refined or teacher) category matches the truth."""
    hits = total = 0
    for det, truth in zip(detections, true_categories):
        if len(det) != len(truth):
            raise ValueError(f"image {det.image_id!r}: {len(det)} proposals but {len(truth)} labels")
        hits += sum(p.category == t for p, t in zip(det.proposals, truth))
        total += len(truth)
    return hits / total if total else float("nan")


def instance_accuracy(model: RefinementModel, bags: Sequence[np.ndarray], true_categories) -> float:
    hits = total = 0
    for X, truth in zip(bags, true_categories):
        if len(X) == 0:
            continue
        pred = forward(model, X).probs.argmax(axis=1)
        hits += int((pred == np.asarray(truth)).sum())
        total += len(truth)
    return hits / total

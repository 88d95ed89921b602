"""Class co-occurrence statistics from image-level labels.

PMI scores ``s_ij = log p(i,j) / (p(i) p(j))`` are turned into a
nonnegative pair-weight matrix ``S`` that feeds the co-occurrence loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import FormatError, ImageLabelVector


class Variant(str, Enum):
    LITERAL = "literal"  # 1 / (1 + exp(s)) for s > 0
    SIGMOID = "sigmoid"  # 1 / (1 + exp(-s)) for s > 0


@dataclass(frozen=True)
class OccurrenceStats:
    marginal: np.ndarray  # (C,)
    joint: np.ndarray  # (C, C), diagonal equals marginal
    num_images: int
    # (pseudo-)counts behind the probabilities; lets pmi avoid round-off at independence
    counts: np.ndarray | None = None
    total: float | None = None

    @property
    def num_classes(self) -> int:
        return len(self.marginal)


@dataclass(frozen=True)
class CooccurrenceMatrix:
    S: np.ndarray
    variant: Variant

    def to_json(self) -> dict:
        return {"variant": self.variant.value, "S": self.S.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "CooccurrenceMatrix":
        S = np.asarray(obj["S"], dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise FormatError(f"S must be square, got shape {S.shape}")
        if not np.array_equal(S, S.T):
            raise FormatError("S must be symmetric")
        return cls(S, Variant(obj["variant"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, allow_nan=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CooccurrenceMatrix":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def estimate_stats(
    labels: Sequence[ImageLabelVector], num_classes: int, smoothing: float = 0.0
) -> OccurrenceStats:
    """Relative-frequency estimates of p(i) and p(i, j).

    ``smoothing`` adds that many pseudo-images in which every class (and so
    every pair) is present; 0 reproduces plain counting.
    """
    if not labels:
        raise ValueError("cannot estimate occurrence statistics from an empty label list")
    Y = np.array([lab.labels for lab in labels], dtype=np.float64)
    if Y.shape[1] != num_classes:
        raise ValueError(f"label vectors have length {Y.shape[1]}, expected {num_classes}")
    # integer-valued sums are exact in float64, so the order of images is irrelevant
    counts = Y.T @ Y
    n = len(labels) + smoothing
    joint = (counts + smoothing) / n
    marginal = np.diag(joint).copy()
    return OccurrenceStats(marginal=marginal, joint=joint, num_images=len(labels),
                           counts=counts + smoothing, total=float(n))


def pmi(stats: OccurrenceStats, i: int, j: int) -> float:
    """Pointwise mutual information; ``-inf`` if any probability is zero."""
    pij = stats.joint[i, j]
    pi, pj = stats.marginal[i], stats.marginal[j]
    if pij <= 0.0 or pi <= 0.0 or pj <= 0.0:
        return -math.inf
    if stats.counts is not None:
        # products of integer counts are exact, so independent pairs give exactly 0
        c = stats.counts
        return math.log((c[i, j] * stats.total) / (c[i, i] * c[j, j]))
    return math.log(pij / (pi * pj))


def pmi_matrix(stats: OccurrenceStats) -> np.ndarray:
    C = stats.num_classes
    return np.array([[pmi(stats, i, j) for j in range(C)] for i in range(C)])


def transform_score(s: float, variant: Variant | str = Variant.LITERAL) -> float:
    if not s > 0:
        return 0.0
    if Variant(variant) is Variant.LITERAL:
        return 1.0 / (1.0 + math.exp(s))
    return 1.0 / (1.0 + math.exp(-s))


def build_matrix(
    stats: OccurrenceStats,
    variant: Variant | str = Variant.LITERAL,
    keep_diagonal: bool = False,
) -> CooccurrenceMatrix:
    variant = Variant(variant)
    C = stats.num_classes
    S = np.zeros((C, C))
    for i in range(C):
        for j in range(i, C):
            if i == j and not keep_diagonal:
                continue
            S[i, j] = S[j, i] = transform_score(pmi(stats, i, j), variant)
    return CooccurrenceMatrix(S, variant)


def cooccurrence_from_labels(
    labels: Sequence[ImageLabelVector],
    num_classes: int,
    variant: Variant | str = Variant.LITERAL,
    keep_diagonal: bool = False,
    smoothing: float = 0.0,
) -> CooccurrenceMatrix:
    return build_matrix(estimate_stats(labels, num_classes, smoothing), variant, keep_diagonal)

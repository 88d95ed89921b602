"""Seeded synthetic detection datasets and a slow reference AP oracle.

Images hold a few objects; each object's feature is its class prototype plus
Gaussian noise.  Selected class pairs co-occur above independence, and
selected pairs are "confusable": their prototypes sit close together and the
simulated teacher swaps one for the other at a given rate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import (
    BoundingBox,
    DatasetManifest,
    GroundTruthBox,
    ImageDetections,
    ImageLabelVector,
    ProposalRecord,
)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 6
    feature_dim: int = 16
    num_images: int = 600
    prototype_separation: float = 4.0
    # (i, j, separation) triples: prototypes of i and j are placed this far apart
    confusable_pairs: tuple[tuple[int, int, float], ...] = ()
    # (i, j, boost): when exactly one of i, j is drawn, add the other with this probability
    cooccur_boost: tuple[tuple[int, int, float], ...] = ()
    presence_prob: float = 0.3
    max_instances_per_class: int = 1
    noise_sigma: float = 1.0
    teacher_corruption_rate: float = 0.0
    teacher_confidence: float = 0.9
    box_jitter: float = 0.0
    # probability that a present class is left out of the weak label vector
    label_miss_rate: float = 0.0
    image_size: tuple[float, float] = (640.0, 512.0)
    seed: int = 0

    def __post_init__(self):
        rates = [self.presence_prob, self.teacher_corruption_rate, self.teacher_confidence, self.box_jitter,
                 self.label_miss_rate]
        rates += [b for _, _, b in self.cooccur_boost]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rates and probabilities must lie in [0, 1]")
        if self.prototype_separation <= 0 or any(s <= 0 for _, _, s in self.confusable_pairs):
            raise ValueError("separations must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        for pairs in (self.confusable_pairs, self.cooccur_boost):
            for i, j, _ in pairs:
                if not (0 <= i < self.num_classes and 0 <= j < self.num_classes and i != j):
                    raise ValueError(f"invalid class pair ({i}, {j})")
        seen = [c for i, j, _ in self.confusable_pairs for c in (i, j)]
        if len(seen) != len(set(seen)):
            raise ValueError("a class may belong to at most one confusable pair")
        if self.max_instances_per_class < 1:
            raise ValueError("max_instances_per_class must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        for key in ("confusable_pairs", "cooccur_boost"):
            if key in d:
                d[key] = tuple((int(i), int(j), float(v)) for i, j, v in d[key])
        if "image_size" in d:
            d["image_size"] = tuple(float(v) for v in d["image_size"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthDataset:
    groundtruth: dict[str, list[GroundTruthBox]]
    detections: list[ImageDetections]
    labels: list[ImageLabelVector]
    manifest: DatasetManifest
    prototypes: np.ndarray
    # per image, per proposal: true class and whether the teacher's class was swapped
    true_categories: list[list[int]] = field(default_factory=list)
    corrupted: list[list[bool]] = field(default_factory=list)

    def subset(self, indices) -> "SynthDataset":
        idx = list(indices)
        ids = [self.detections[i].image_id for i in idx]
        return SynthDataset(
            groundtruth={k: self.groundtruth[k] for k in ids},
            detections=[self.detections[i] for i in idx],
            labels=[self.labels[i] for i in idx],
            manifest=self.manifest,
            prototypes=self.prototypes,
            true_categories=[self.true_categories[i] for i in idx],
            corrupted=[self.corrupted[i] for i in idx],
        )


def make_prototypes(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    C, D = config.num_classes, config.feature_dim
    if D >= C:
        # orthonormal directions; pairwise distance = separation
        q, _ = np.linalg.qr(rng.normal(size=(D, C)))
        protos = q.T * (config.prototype_separation / np.sqrt(2.0))
    else:
        protos = rng.normal(size=(C, D)) * config.prototype_separation / np.sqrt(2.0 * D)
    for i, j, sep in config.confusable_pairs:
        direction = protos[j] - protos[i]
        direction /= np.linalg.norm(direction)
        mid = (protos[i] + protos[j]) / 2
        protos[i] = mid - direction * sep / 2
        protos[j] = mid + direction * sep / 2
    return protos


def _sample_classes(config: SynthConfig, rng: np.random.Generator) -> list[int]:
    present = rng.random(config.num_classes) < config.presence_prob
    for i, j, boost in config.cooccur_boost:
        if present[i] != present[j] and rng.random() < boost:
            present[i] = present[j] = True
    if not present.any():
        present[rng.integers(config.num_classes)] = True
    return [int(c) for c in np.flatnonzero(present)]


def _sample_box(config: SynthConfig, rng: np.random.Generator) -> BoundingBox:
    W, H = config.image_size
    w = rng.uniform(0.08, 0.3) * W
    h = rng.uniform(0.08, 0.3) * H
    u1 = rng.uniform(0, W - w)
    v1 = rng.uniform(0, H - h)
    return BoundingBox(u1, v1, u1 + w, v1 + h)


def _jitter_box(box: BoundingBox, jitter: float, config: SynthConfig, rng) -> BoundingBox:
    if jitter == 0:
        return box
    w, h = box.u2 - box.u1, box.v2 - box.v1
    d = rng.normal(0, jitter, size=4) * np.array([w, h, w, h])
    W, H = config.image_size
    u1 = min(max(box.u1 + d[0], 0.0), W - 2.0)
    v1 = min(max(box.v1 + d[1], 0.0), H - 2.0)
    u2 = min(max(box.u2 + d[2], u1 + 1.0), W)
    v2 = min(max(box.v2 + d[3], v1 + 1.0), H)
    return BoundingBox(float(u1), float(v1), float(u2), float(v2))


def generate(config: SynthConfig) -> SynthDataset:
    """Ground truth, teacher detections, image labels and manifest; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    C = config.num_classes
    protos = make_prototypes(config, rng)
    partner = {}
    for i, j, _ in config.confusable_pairs:
        partner[i], partner[j] = j, i

    gt, dets, labels, truths, corrupted = {}, [], [], [], []
    for n in range(config.num_images):
        image_id = f"img{n:06d}"
        classes = _sample_classes(config, rng)
        boxes, proposals, truth, flips = [], [], [], []
        for c in classes:
            for _ in range(int(rng.integers(1, config.max_instances_per_class + 1))):
                box = _sample_box(config, rng)
                boxes.append(GroundTruthBox(box, c))
                feature = protos[c] + rng.normal(0, config.noise_sigma, size=config.feature_dim)
                flip = c in partner and rng.random() < config.teacher_corruption_rate
                teacher_class = partner[c] if flip else c
                conf = config.teacher_confidence
                probs = np.full(C, (1.0 - conf) / max(C - 1, 1))
                probs[teacher_class] = conf if C > 1 else 1.0
                proposals.append(ProposalRecord(
                    box=_jitter_box(box, config.box_jitter, config, rng),
                    objectness=float(rng.uniform(0.5, 1.0)),
                    teacher_probs=tuple(float(p) for p in probs),
                    feature=tuple(float(v) for v in feature),
                ))
                truth.append(c)
                flips.append(bool(flip))
        gt[image_id] = boxes
        dets.append(ImageDetections(image_id, tuple(proposals)))
        y = [0] * C
        for c in classes:
            y[c] = 1
        if config.label_miss_rate:
            for c in classes:
                if rng.random() < config.label_miss_rate:
                    y[c] = 0
        labels.append(ImageLabelVector(image_id, tuple(y)))
        truths.append(truth)
        corrupted.append(flips)

    manifest = DatasetManifest(C, config.feature_dim, num_full=0, num_weak=config.num_images)
    return SynthDataset(gt, dets, labels, manifest, protos, truths, corrupted)


# ---------------------------------------------------------------------------
# brute-force AP oracle (exact rational arithmetic, plain loops)


class OracleTooLarge(ValueError):
    pass


def _exact_iou(a: BoundingBox, b: BoundingBox) -> Fraction:
    a = [Fraction(v) for v in a.to_list()]
    b = [Fraction(v) for v in b.to_list()]
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def oracle_ap(
    predictions: Sequence[ImageDetections],
    groundtruth: Mapping[str, Sequence[GroundTruthBox]],
    num_classes: int,
    max_predictions: int = 12,
) -> dict[tuple[int, int], float]:
    """AP for every (class, threshold index) with ground truth present.

    Scores use the same objectness x class-probability rule as the evaluator.
    """
    thresholds = [Fraction(10 + k, 20) for k in range(10)]
    result = {}
    for c in range(num_classes):
        gts = [(image_id, g.box) for image_id, boxes in groundtruth.items() for g in boxes if g.category == c]
        if not gts:
            continue
        preds = []
        position = 0
        for det in predictions:
            for p in det.proposals:
                if p.category == c:
                    probs = p.refined_probs if p.refined_probs is not None else p.teacher_probs
                    preds.append((p.objectness * probs[c], det.image_id, position, p.box))
                position += 1
        if len(preds) > max_predictions:
            raise OracleTooLarge(f"class {c}: {len(preds)} predictions, oracle limit {max_predictions}")
        # highest score first; ties by image id, then original order
        ranked = []
        remaining = list(preds)
        while remaining:
            best = remaining[0]
            for cand in remaining[1:]:
                if cand[0] > best[0] or (cand[0] == best[0] and (cand[1], cand[2]) < (best[1], best[2])):
                    best = cand
            ranked.append(best)
            remaining.remove(best)

        for t_index, thr in enumerate(thresholds):
            used = [False] * len(gts)
            hits = []
            for _, image_id, _, box in ranked:
                choice = None
                choice_iou = None
                for g, (gid, gbox) in enumerate(gts):
                    if gid != image_id or used[g]:
                        continue
                    o = _exact_iou(box, gbox)
                    if o >= thr and (choice_iou is None or o > choice_iou):
                        choice, choice_iou = g, o
                if choice is not None:
                    used[choice] = True
                hits.append(choice is not None)
            # (recall, precision) after each rank, exactly
            points = []
            tp = 0
            for rank, hit in enumerate(hits, start=1):
                tp += hit
                points.append((Fraction(tp, len(gts)), Fraction(tp, rank)))
            total = Fraction(0)
            for k in range(101):
                r = Fraction(k, 100)
                best_precision = Fraction(0)
                for rec, prec in points:
                    if rec >= r and prec > best_precision:
                        best_precision = prec
                total += best_precision
            result[(c, t_index)] = float(total / 101)
    return result


def oracle_map(predictions, groundtruth, num_classes, max_predictions: int = 12) -> float:
    aps = oracle_ap(predictions, groundtruth, num_classes, max_predictions)
    return sum(aps.values()) / len(aps) if aps else 0.0

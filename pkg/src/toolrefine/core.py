"""Domain types and JSON-lines file I/O.

Every file format is line-oriented JSON.  Floats go through ``repr`` (the
shortest string that parses back to the same double), so save -> load is
bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class FormatError(ValueError):
    """Raised when a file or record violates its schema."""


class DimensionError(FormatError):
    """Raised when a vector length disagrees with the manifest."""


def _finite(values: Iterable[float]) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class BoundingBox:
    u1: float
    v1: float
    u2: float
    v2: float

    def __post_init__(self):
        coords = (self.u1, self.v1, self.u2, self.v2)
        if not _finite(coords):
            raise FormatError(f"non-finite box coordinates {coords}")
        if min(coords) < 0:
            raise FormatError(f"negative box coordinates {coords}")
        if not (self.u1 < self.u2 and self.v1 < self.v2):
            raise FormatError(f"degenerate box {coords}: need u1<u2 and v1<v2")

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        if len(values) != 4:
            raise FormatError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> list[float]:
        return [self.u1, self.v1, self.u2, self.v2]

    @property
    def area(self) -> float:
        return (self.u2 - self.u1) * (self.v2 - self.v1)


@dataclass(frozen=True)
class ProposalRecord:
    """One teacher detection.

    ``refined_category``/``refined_probs`` are only set on the output of
    :func:`toolrefine.refine.refine_labels`.
    """

    box: BoundingBox
    objectness: float
    teacher_probs: tuple[float, ...]
    feature: tuple[float, ...]
    refined_category: int | None = None
    refined_probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (0.0 <= self.objectness <= 1.0):
            raise FormatError(f"objectness {self.objectness} outside [0, 1]")
        if not all(0.0 <= p <= 1.0 for p in self.teacher_probs):
            raise FormatError("teacher probabilities must lie in [0, 1]")
        if not _finite(self.feature):
            raise FormatError("feature vector contains non-finite values")
        if (self.refined_category is None) != (self.refined_probs is None):
            raise FormatError("refined_category and refined_probs must be set together")
        if self.refined_probs is not None:
            if not all(0.0 <= p <= 1.0 for p in self.refined_probs):
                raise FormatError("refined probabilities must lie in [0, 1]")
            if len(self.refined_probs) != len(self.teacher_probs):
                raise DimensionError("refined_probs length differs from probs length")

    @property
    def teacher_category(self) -> int:
        return int(np.argmax(self.teacher_probs))

    @property
    def category(self) -> int:
        """Refined class if present, else the teacher's argmax."""
        if self.refined_category is not None:
            return self.refined_category
        return self.teacher_category

    @property
    def class_probability(self) -> float:
        probs = self.refined_probs if self.refined_probs is not None else self.teacher_probs
        return float(probs[self.category])

    @property
    def is_refined(self) -> bool:
        return self.refined_category is not None


@dataclass(frozen=True)
class ImageDetections:
    image_id: str
    proposals: tuple[ProposalRecord, ...] = ()

    def __post_init__(self):
        if not self.image_id:
            raise FormatError("empty image_id")

    def __len__(self) -> int:
        return len(self.proposals)

    def feature_matrix(self) -> np.ndarray:
        """N x D float64 matrix of proposal features."""
        if not self.proposals:
            return np.zeros((0, 0))
        return np.array([p.feature for p in self.proposals], dtype=np.float64)


@dataclass(frozen=True)
class ImageLabelVector:
    image_id: str
    labels: tuple[int, ...]

    def __post_init__(self):
        if not self.image_id:
            raise FormatError("empty image_id")
        if any(v not in (0, 1) for v in self.labels):
            raise FormatError(f"labels for {self.image_id} must be 0/1")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.float64)


@dataclass(frozen=True)
class GroundTruthBox:
    box: BoundingBox
    category: int


@dataclass(frozen=True)
class DatasetManifest:
    num_classes: int
    feature_dim: int
    class_names: tuple[str, ...] = field(default=())
    num_full: int = 0
    num_weak: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.feature_dim < 1:
            raise FormatError("num_classes and feature_dim must be positive")
        if not self.class_names:
            object.__setattr__(
                self, "class_names", tuple(f"class_{k}" for k in range(self.num_classes))
            )
        if len(self.class_names) != self.num_classes:
            raise FormatError(
                f"class_names has {len(self.class_names)} entries, expected {self.num_classes}"
            )
        if self.num_full < 0 or self.num_weak < 0:
            raise FormatError("dataset counts must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "class_names": list(self.class_names),
            "num_full": self.num_full,
            "num_weak": self.num_weak,
        }


# ---------------------------------------------------------------------------
# file I/O


def _iter_json_lines(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _dump(obj) -> str:
    # allow_nan=False: NaN/Inf never reach disk
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def _check_unique(seen: set, image_id: str, where: str):
    if image_id in seen:
        raise FormatError(f"{where}: duplicate image_id {image_id!r}")
    seen.add(image_id)


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: malformed manifest ({exc.msg})") from None
    try:
        return DatasetManifest(
            num_classes=int(obj["num_classes"]),
            feature_dim=int(obj["feature_dim"]),
            class_names=tuple(obj.get("class_names", ())),
            num_full=int(obj.get("num_full", 0)),
            num_weak=int(obj.get("num_weak", 0)),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: manifest missing field {exc}") from None


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def _parse_proposal(raw: dict, manifest: DatasetManifest, image_id: str) -> ProposalRecord:
    probs = tuple(float(v) for v in raw["probs"])
    feature = tuple(float(v) for v in raw["feature"])
    if len(probs) != manifest.num_classes:
        raise DimensionError(
            f"image {image_id!r}: probs has length {len(probs)}, expected C={manifest.num_classes}"
        )
    if len(feature) != manifest.feature_dim:
        raise DimensionError(
            f"image {image_id!r}: feature has length {len(feature)}, expected D={manifest.feature_dim}"
        )
    refined_probs = raw.get("refined_probs")
    if refined_probs is not None:
        refined_probs = tuple(float(v) for v in refined_probs)
        if len(refined_probs) != manifest.num_classes:
            raise DimensionError(f"image {image_id!r}: refined_probs has wrong length")
    refined_category = raw.get("refined_category")
    if refined_category is not None:
        refined_category = int(refined_category)
        if not 0 <= refined_category < manifest.num_classes:
            raise FormatError(f"image {image_id!r}: refined_category out of range")
    return ProposalRecord(
        box=BoundingBox.from_list(raw["box"]),
        objectness=float(raw["objectness"]),
        teacher_probs=probs,
        feature=feature,
        refined_category=refined_category,
        refined_probs=refined_probs,
    )


def load_detections(path, manifest: DatasetManifest) -> list[ImageDetections]:
    """Read a detections file, validating every record against ``manifest``."""
    out: list[ImageDetections] = []
    seen: set[str] = set()
    for lineno, obj in _iter_json_lines(path):
        image_id = obj.get("image_id")
        if not isinstance(image_id, str):
            raise FormatError(f"{path}:{lineno}: missing or non-string image_id")
        _check_unique(seen, image_id, f"{path}:{lineno}")
        try:
            proposals = tuple(_parse_proposal(p, manifest, image_id) for p in obj["proposals"])
        except DimensionError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: invalid proposal in {image_id!r}: {exc}") from None
        out.append(ImageDetections(image_id, proposals))
    return out


def proposal_to_dict(p: ProposalRecord) -> dict:
    d = {
        "box": p.box.to_list(),
        "objectness": p.objectness,
        "probs": list(p.teacher_probs),
        "feature": list(p.feature),
    }
    if p.refined_category is not None:
        d["refined_category"] = p.refined_category
        d["refined_probs"] = list(p.refined_probs)
    return d


def save_detections(path, detections: Iterable[ImageDetections]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            line = {"image_id": det.image_id, "proposals": [proposal_to_dict(p) for p in det.proposals]}
            fh.write(_dump(line) + "\n")


def load_labels(path, manifest: DatasetManifest) -> list[ImageLabelVector]:
    out = []
    seen: set[str] = set()
    for lineno, obj in _iter_json_lines(path):
        image_id = obj.get("image_id")
        if not isinstance(image_id, str):
            raise FormatError(f"{path}:{lineno}: missing or non-string image_id")
        _check_unique(seen, image_id, f"{path}:{lineno}")
        labels = obj.get("labels")
        if not isinstance(labels, list):
            raise FormatError(f"{path}:{lineno}: missing labels list")
        if len(labels) != manifest.num_classes:
            raise DimensionError(
                f"image {image_id!r}: label vector has length {len(labels)}, expected C={manifest.num_classes}"
            )
        try:
            out.append(ImageLabelVector(image_id, tuple(int(v) for v in labels)))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def save_labels(path, labels: Iterable[ImageLabelVector]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(_dump({"image_id": lab.image_id, "labels": list(lab.labels)}) + "\n")


def load_groundtruth(path, manifest: DatasetManifest) -> dict[str, list[GroundTruthBox]]:
    out: dict[str, list[GroundTruthBox]] = {}
    for lineno, obj in _iter_json_lines(path):
        image_id = obj.get("image_id")
        if not isinstance(image_id, str) or not image_id:
            raise FormatError(f"{path}:{lineno}: missing or non-string image_id")
        if image_id in out:
            raise FormatError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
        boxes = []
        try:
            for raw in obj["boxes"]:
                category = int(raw["category"])
                if not 0 <= category < manifest.num_classes:
                    raise FormatError(
                        f"image {image_id!r}: category {category} outside [0, {manifest.num_classes})"
                    )
                boxes.append(GroundTruthBox(BoundingBox.from_list(raw["box"]), category))
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: invalid ground-truth box: {exc}") from None
        out[image_id] = boxes
    return out


def save_groundtruth(path, groundtruth: dict[str, list[GroundTruthBox]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, boxes in groundtruth.items():
            line = {
                "image_id": image_id,
                "boxes": [{"box": b.box.to_list(), "category": b.category} for b in boxes],
            }
            fh.write(_dump(line) + "\n")

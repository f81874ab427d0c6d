"""Binary segmentation metrics: confusion counts and intersection over union.

Evaluation is micro-averaged: counts accumulate over every pixel of
every item before the final ratio, so large and small panels weigh by
area rather than by image.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, ValidationError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, other: "ConfusionCounts") -> "ConfusionCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn
        return self

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Probabilities -> {0, 1} mask; a value equal to the threshold maps to 1."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold: must lie in (0, 1), got {threshold}")
    pr = np.asarray(probs)
    if not np.all(np.isfinite(pr)):
        raise ValidationError("probs: non-finite values")
    return (pr >= threshold).astype(np.uint8)


def _check_binary(name: str, arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if not np.all((a == 0) | (a == 1)):
        raise ValidationError(f"{name}: values other than {{0, 1}}")
    return a.astype(bool)


def confusion_counts(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    """Pixel-wise confusion between two binary masks of identical shape."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise DimensionMismatchError(f"pred shape {p.shape} != target shape {t.shape}")
    pb = _check_binary("pred", p)
    tb = _check_binary("target", t)
    return ConfusionCounts(
        tp=int(np.count_nonzero(pb & tb)),
        fp=int(np.count_nonzero(pb & ~tb)),
        fn=int(np.count_nonzero(~pb & tb)),
        tn=int(np.count_nonzero(~pb & ~tb)),
    )


def iou(counts: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); two empty masks agree perfectly and score 1.0."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return counts.tp / denom


@dataclass
class MetricsReport:
    """Evaluation summary; serializes to a stable JSON schema."""

    iou: float
    threshold: float
    counts: ConfusionCounts
    per_item: list[tuple[str, float]] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "iou": self.iou,
            "threshold": self.threshold,
            "counts": self.counts.as_dict(),
            "per_item": [{"id": i, "iou": v} for i, v in self.per_item],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(
            iou=float(doc["iou"]),
            threshold=float(doc["threshold"]),
            counts=ConfusionCounts(**{k: int(v) for k, v in doc["counts"].items()}),
            per_item=[(str(e["id"]), float(e["iou"])) for e in doc["per_item"]],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "MetricsReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

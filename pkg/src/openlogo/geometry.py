"""Box overlap and greedy detection-to-ground-truth assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import OpenLogoError

__all__ = ["Box", "MatchResult", "greedy_match", "iou"]

DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not self.w > 0 or not self.h > 0:
            raise OpenLogoError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def of(cls, obj) -> "Box":
        """Box from anything with x/y/w/h attributes (RoI, Box) or a 4-sequence."""
        if isinstance(obj, Box):
            return obj
        if hasattr(obj, "xywh"):
            return cls(*obj.xywh)
        return cls(*obj)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def xywh(self) -> tuple:
        return (self.x, self.y, self.w, self.h)

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 for disjoint or edge-touching boxes."""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_ground_truths: list[int] = field(default_factory=list)

    @property
    def n_true_positives(self) -> int:
        return len(self.pairs)

    @property
    def n_false_positives(self) -> int:
        return len(self.unmatched_detections)

    def matched_detections(self) -> set[int]:
        return {d for d, _, _ in self.pairs}


def greedy_match(
    detections: Sequence[tuple[Box, float]],
    ground_truths: Sequence[Box],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """Assign detections to ground truths greedily by descending score.

    Each detection, in score order with ties broken by input position, takes
    the still-unmatched ground truth it overlaps most, provided the IoU
    reaches ``iou_threshold``. Otherwise it is a false positive, which also
    covers duplicates on an already matched ground truth.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise OpenLogoError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    free = list(range(len(ground_truths)))
    result = MatchResult()
    for d in order:
        box = detections[d][0]
        best, best_iou = -1, -1.0
        for g in free:
            o = iou(box, ground_truths[g])
            # strict > keeps the lowest gt index on IoU ties
            if o > best_iou:
                best, best_iou = g, o
        if best >= 0 and best_iou >= iou_threshold:
            result.pairs.append((d, best, best_iou))
            free.remove(best)
        else:
            result.unmatched_detections.append(d)
    result.unmatched_detections.sort()
    result.unmatched_ground_truths = free
    return result

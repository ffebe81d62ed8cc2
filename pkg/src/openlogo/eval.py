"""FROC curves, average precision and the single-query open-set protocol.

Every brand in the query set is searched with one query crop at a time. A
ranked result is a correct identification when it overlaps an unclaimed
ground-truth box of the query brand (greedy matching in rank order); every
other result is a false positive for that query, including correctly
localized logos of other brands.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .dataset import Dataset, ImageRecord, normalize_brand
from .errors import InvariantError, OpenLogoError
from .geometry import DEFAULT_IOU_THRESHOLD, Box, greedy_match
from .retrieval import Detection, Extractor, Index, RankedMatch, query

__all__ = [
    "DEFAULT_FPPI_GRID",
    "EvalReport",
    "EvaluationError",
    "FrocCurve",
    "QueryEvalResult",
    "average_precision",
    "curve_csv",
    "detection_froc",
    "identification_flags",
    "identification_froc",
    "operating_point",
    "per_brand_ap_csv",
    "query_crops",
    "run_open_set_protocol",
]

DEFAULT_FPPI_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)


class EvaluationError(OpenLogoError):
    pass


@dataclass
class FrocCurve:
    """Operating points (fppi, rate), one per distinct score threshold.

    ``thresholds[i]`` is the score cut-off that produced ``points[i]``;
    ``inf`` marks the empty-sweep point (0, 0).
    """

    points: list[tuple[float, float]]
    n_images: int
    n_ground_truth: int
    thresholds: list[float] = field(default_factory=list)

    def __post_init__(self):
        prev_f, prev_r = 0.0, 0.0
        for f, r in self.points:
            if f < prev_f or r < prev_r or not 0.0 <= r <= 1.0:
                raise InvariantError(f"FROC points not monotone or out of range: {self.points}")
            prev_f, prev_r = f, r

    @property
    def fppi(self) -> list[float]:
        return [p[0] for p in self.points]

    @property
    def rates(self) -> list[float]:
        return [p[1] for p in self.points]


@dataclass
class QueryEvalResult:
    brand: str
    iteration: int
    ap: float
    curve: FrocCurve


@dataclass
class EvalReport:
    map: float
    map_std: float
    per_brand_ap: dict[str, float]
    mean_curve: FrocCurve
    curve_std: list[float]
    iteration_maps: list[float]
    results: list[QueryEvalResult] = field(default_factory=list)
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    interpolated_ap: bool = False

    @property
    def fppi_grid(self) -> list[float]:
        return self.mean_curve.fppi

    def to_json(self) -> dict:
        return {
            "map": self.map,
            "map_std": self.map_std,
            "n_iterations": len(self.iteration_maps),
            "n_brands": len(self.per_brand_ap),
            "iteration_maps": self.iteration_maps,
            "per_brand_ap": dict(sorted(self.per_brand_ap.items())),
            "fppi_grid": self.fppi_grid,
            "mean_curve": self.mean_curve.rates,
            "curve_std": self.curve_std,
            "iou_threshold": self.iou_threshold,
            "ap_mode": "11point" if self.interpolated_ap else "uninterpolated",
            "queries": [
                {"brand": r.brand, "iteration": r.iteration, "ap": r.ap} for r in self.results
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"


# -- curves -----------------------------------------------------------------


def _sweep(scores: Sequence[float], flags: Sequence[bool], n_images: int, n_gt: int) -> FrocCurve:
    """Threshold sweep over results already in descending score order.

    ``flags[i]`` says whether result i is a true positive when everything
    scoring at least ``scores[i]`` is kept.
    """
    if not scores:
        return FrocCurve([(0.0, 0.0)], n_images, n_gt, [math.inf])
    points, thresholds = [], []
    tp = fp = 0
    for i, (s, ok) in enumerate(zip(scores, flags)):
        if ok:
            tp += 1
        else:
            fp += 1
        if i + 1 == len(scores) or scores[i + 1] != s:
            points.append((fp / n_images, tp / n_gt))
            thresholds.append(s)
    return FrocCurve(points, n_images, n_gt, thresholds)


def detection_froc(
    detections: Sequence[Detection],
    ground_truth: Dataset,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> FrocCurve:
    """Class-agnostic detection FROC: rate of matched ground truth vs false
    positives per image, one point per distinct detector score.

    The image count includes distractor images without any RoI.
    """
    n_gt = ground_truth.n_rois
    if n_gt == 0:
        raise EvaluationError("ground truth contains no RoIs")
    records = ground_truth.by_id()
    per_image: dict[str, list[int]] = defaultdict(list)
    for i, d in enumerate(detections):
        if d.image_id not in records:
            raise EvaluationError(f"detection references unknown image {d.image_id!r}")
        per_image[d.image_id].append(i)

    hit = [False] * len(detections)
    for image_id, idx in per_image.items():
        gts = [Box(*r.xywh) for r in records[image_id].rois]
        res = greedy_match([(detections[i].box, detections[i].detector_score) for i in idx], gts, iou_threshold)
        for d, _, _ in res.pairs:
            hit[idx[d]] = True

    order = sorted(range(len(detections)), key=lambda i: (-detections[i].detector_score, i))
    return _sweep(
        [detections[i].detector_score for i in order], [hit[i] for i in order], len(ground_truth), n_gt
    )


def _brand_boxes(ground_truth: Dataset, brand: str) -> dict[str, list[Box]]:
    out: dict[str, list[Box]] = {}
    for rec in ground_truth.images:
        boxes = [Box(*r.xywh) for r in rec.rois if r.brand == brand]
        if boxes:
            out[rec.image_id] = boxes
    return out


def identification_flags(
    matches: Sequence[RankedMatch],
    ground_truth: Dataset,
    query_brand: str,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    *,
    _brand_gt: dict[str, list[Box]] | None = None,
) -> list[bool]:
    """Per ranked match: does it claim a query-brand ground-truth box?

    Greedy matching runs per image in rank order, so a second hit on an
    already claimed box is a false positive.
    """
    brand_gt = _brand_boxes(ground_truth, normalize_brand(query_brand)) if _brand_gt is None else _brand_gt
    per_image: dict[str, list[int]] = defaultdict(list)
    for rank, m in enumerate(matches):
        if m.entry.image_id in brand_gt:
            per_image[m.entry.image_id].append(rank)
    flags = [False] * len(matches)
    for image_id, ranks in per_image.items():
        dets = [(matches[r].entry.box, matches[r].similarity) for r in ranks]
        for d, _, _ in greedy_match(dets, brand_gt[image_id], iou_threshold).pairs:
            flags[ranks[d]] = True
    return flags


def identification_froc(
    matches: Sequence[RankedMatch],
    ground_truth: Dataset,
    query_brand: str,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> FrocCurve:
    """Detection+identification FROC of one query, swept over similarity.

    Rate is the share of query-brand boxes claimed; every other kept match
    counts as a false positive.
    """
    brand = normalize_brand(query_brand)
    brand_gt = _brand_boxes(ground_truth, brand)
    if not brand_gt:
        raise EvaluationError(f"query brand {brand!r} absent from ground truth")
    _check_images(matches, ground_truth)
    flags = identification_flags(matches, ground_truth, brand, iou_threshold, _brand_gt=brand_gt)
    return _sweep([m.similarity for m in matches], flags, len(ground_truth), sum(map(len, brand_gt.values())))


def _check_images(matches: Iterable[RankedMatch], ground_truth: Dataset) -> None:
    ids = ground_truth.by_id()
    for m in matches:
        if m.entry.image_id not in ids:
            raise EvaluationError(f"match references image {m.entry.image_id!r} not in ground truth")


def operating_point(curve: FrocCurve, fppi: float) -> float:
    """Rate of the last curve point whose fppi does not exceed ``fppi``."""
    rate = 0.0
    for f, r in curve.points:
        if f > fppi:
            break
        rate = r
    return rate


# -- average precision ------------------------------------------------------


def average_precision(flags: Sequence[bool], n_relevant_total: int, interpolated: bool = False) -> float:
    """AP of a ranked relevance list.

    Uninterpolated by default: the mean over all ``n_relevant_total`` relevant
    items of the precision at the rank where each was retrieved (0 for items
    never retrieved). ``interpolated=True`` gives the 11-point VOC07 variant.
    """
    n_hits = sum(1 for f in flags if f)
    if n_relevant_total < 1:
        raise EvaluationError("n_relevant_total must be at least 1")
    if n_hits > n_relevant_total:
        raise EvaluationError(f"{n_hits} relevant flags exceed n_relevant_total={n_relevant_total}")
    if not interpolated:
        total, hits = 0.0, 0
        for rank, f in enumerate(flags, start=1):
            if f:
                hits += 1
                total += hits / rank
        return total / n_relevant_total

    precisions, recalls = [], []
    hits = 0
    for rank, f in enumerate(flags, start=1):
        hits += bool(f)
        precisions.append(hits / rank)
        recalls.append(hits / n_relevant_total)
    ap = 0.0
    for t in (i / 10 for i in range(11)):
        ap += max((p for p, r in zip(precisions, recalls) if r >= t), default=0.0)
    return ap / 11


# -- protocol ---------------------------------------------------------------


def query_crops(query_source: Dataset) -> dict[str, list[tuple[ImageRecord, int]]]:
    """Query crops per brand, in dataset order; crop i serves iteration i."""
    crops: dict[str, list[tuple[ImageRecord, int]]] = defaultdict(list)
    for rec in query_source.images:
        for i, roi in enumerate(rec.rois):
            crops[roi.brand].append((rec, i))
    return dict(crops)


def run_open_set_protocol(
    index: Index,
    ground_truth: Dataset,
    query_source: Dataset,
    extractor: Extractor,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    n_iterations: int | None = None,
    fppi_grid: Sequence[float] = DEFAULT_FPPI_GRID,
    interpolated_ap: bool = False,
) -> EvalReport:
    """Single-sample retrieval evaluation over brands and query iterations.

    In iteration i every brand of ``query_source`` is queried with its i-th
    crop against the full index. Per-iteration mAP is the mean AP over
    brands; the report holds the mean and population std over iterations,
    plus the mean FROC sampled on ``fppi_grid``. ``n_iterations`` defaults
    to the smallest number of crops any brand has.
    """
    crops = query_crops(query_source)
    if not crops:
        raise EvaluationError("query set contains no query crops")
    brands = sorted(crops)
    gt_brands = ground_truth.brands()
    missing = [b for b in brands if b not in gt_brands]
    if missing:
        raise EvaluationError(f"query brands absent from ground truth: {', '.join(missing)}")
    if n_iterations is None:
        n_iterations = min(len(c) for c in crops.values())
    if n_iterations < 1:
        raise EvaluationError("n_iterations must be at least 1")
    short = [b for b in brands if len(crops[b]) < n_iterations]
    if short:
        raise EvaluationError(f"missing query crop for iteration {n_iterations - 1} of brands: {', '.join(short)}")
    grid = sorted(float(g) for g in fppi_grid)
    if not grid or grid[0] < 0:
        raise EvaluationError("fppi grid must be non-empty and non-negative")
    _check_images((RankedMatch(e, 0.0) for e in index.entries), ground_truth)

    n_images = len(ground_truth)
    brand_gt = {b: _brand_boxes(ground_truth, b) for b in brands}
    n_brand_gt = {b: sum(map(len, brand_gt[b].values())) for b in brands}

    results: list[QueryEvalResult] = []
    iteration_maps: list[float] = []
    iteration_rates: list[list[float]] = []
    for it in range(n_iterations):
        aps, rates = [], [[] for _ in grid]
        for b in brands:
            rec, roi_index = crops[b][it]
            roi = rec.rois[roi_index]
            feature = extractor.extract(rec, Box(*roi.xywh), roi_index)
            matches = query(index, feature)
            flags = identification_flags(matches, ground_truth, b, iou_threshold, _brand_gt=brand_gt[b])
            ap = average_precision(flags, n_brand_gt[b], interpolated=interpolated_ap)
            curve = _sweep([m.similarity for m in matches], flags, n_images, n_brand_gt[b])
            results.append(QueryEvalResult(b, it, ap, curve))
            aps.append(ap)
            for k, g in enumerate(grid):
                rates[k].append(operating_point(curve, g))
        iteration_maps.append(statistics.fmean(aps))
        iteration_rates.append([statistics.fmean(r) for r in rates])

    map_ = statistics.fmean(iteration_maps)
    if abs(map_ - math.fsum(iteration_maps) / len(iteration_maps)) > 1e-12:
        raise InvariantError("mAP is not the mean of iteration mAPs")
    per_brand = {b: statistics.fmean(r.ap for r in results if r.brand == b) for b in brands}
    mean_rates = [statistics.fmean(col) for col in zip(*iteration_rates)]
    std_rates = [statistics.pstdev(col) for col in zip(*iteration_rates)]
    mean_curve = FrocCurve(list(zip(grid, mean_rates)), n_images, sum(n_brand_gt.values()), list(grid))
    return EvalReport(
        map=map_,
        map_std=statistics.pstdev(iteration_maps),
        per_brand_ap=per_brand,
        mean_curve=mean_curve,
        curve_std=std_rates,
        iteration_maps=iteration_maps,
        results=results,
        iou_threshold=iou_threshold,
        interpolated_ap=interpolated_ap,
    )


# -- export -----------------------------------------------------------------


def curve_csv(curve: FrocCurve, std: Sequence[float] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fppi", "rate"] + (["std"] if std is not None else []))
    for i, (f, r) in enumerate(curve.points):
        writer.writerow([repr(f), repr(r)] + ([repr(std[i])] if std is not None else []))
    return buf.getvalue()


def per_brand_ap_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["brand", "ap"])
    for b, ap in sorted(report.per_brand_ap.items()):
        writer.writerow([b, repr(ap)])
    return buf.getvalue()

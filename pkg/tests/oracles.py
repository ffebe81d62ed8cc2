"""Slow reference implementations used to check the fast paths."""

from __future__ import annotations

import math

from openlogo.features import baseline_descriptor
from openlogo.geometry import Box, greedy_match


def brute_ap(flags, n_relevant_total):
    total = 0.0
    for k in range(1, len(flags) + 1):
        if flags[k - 1]:
            total += sum(1 for f in flags[:k] if f) / k
    return total / n_relevant_total


def naive_detection_froc(detections, dataset, iou_threshold=0.5):
    """Re-run matching from scratch at every distinct score threshold."""
    n_gt = sum(len(r.rois) for r in dataset.images)
    if not detections:
        return [(0.0, 0.0)]
    points = []
    for t in sorted({d.detector_score for d in detections}, reverse=True):
        tp = fp = 0
        for rec in dataset.images:
            kept = [(d.box, d.detector_score) for d in detections if d.image_id == rec.image_id and d.detector_score >= t]
            r = greedy_match(kept, [Box(*x.xywh) for x in rec.rois], iou_threshold)
            tp += len(r.pairs)
            fp += len(r.unmatched_detections)
        points.append((fp / len(dataset.images), tp / n_gt))
    return points


def _cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


def oracle_protocol_map(dataset, images, queries, query_images, n_iterations):
    """mAP of the single-query protocol for oracle detections.

    With oracle detections every indexed box is exactly one ground-truth
    box, so an entry is relevant iff its brand equals the query brand. The
    ranking is built by sorting (-similarity, image_id, roi position).
    """
    entries = []
    for rec in sorted(dataset.images, key=lambda r: r.image_id):
        for k, roi in enumerate(rec.rois):
            vec = list(baseline_descriptor(images[rec.image_id], Box(*roi.xywh)))
            entries.append((rec.image_id, k, roi.brand, vec))
    crops = {}
    for rec in queries.images:
        for roi in rec.rois:
            crops.setdefault(roi.brand, []).append((rec, roi))
    iteration_maps = []
    for it in range(n_iterations):
        aps = []
        for brand in sorted(crops):
            rec, roi = crops[brand][it]
            q = list(baseline_descriptor(query_images[rec.image_id], Box(*roi.xywh)))
            ranked = sorted(entries, key=lambda e: (-round(_cos(q, e[3]), 12), e[0], e[1]))
            flags = [e[2] == brand for e in ranked]
            aps.append(brute_ap(flags, sum(1 for e in entries if e[2] == brand)))
        iteration_maps.append(sum(aps) / len(aps))
    return sum(iteration_maps) / n_iterations, iteration_maps

"""Detection providers, the feature index and query-by-example ranking.

Retrieval is two-staged: a class-agnostic detector proposes logo boxes, each
box is described by a feature extractor, and a query logo is compared
against every indexed box by cosine similarity. Detector scores are carried
along for FROC sweeps but never influence the ranking.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .dataset import Dataset, ImageRecord
from .errors import OpenLogoError
from .features import (
    EmbeddingTable,
    baseline_descriptor,
    format_float,
    l2_normalize,
    load_image,
    read_embedding_rows,
    write_embedding_rows,
)
from .geometry import Box

__all__ = [
    "BaselineExtractor",
    "Detection",
    "EmbeddingExtractor",
    "Extractor",
    "Index",
    "IndexEntry",
    "RankedMatch",
    "RetrievalError",
    "build_index",
    "dumps_detections",
    "dumps_index",
    "load_detections",
    "load_index",
    "oracle_detections",
    "query",
    "query_from_region",
    "save_detections",
    "save_index",
]

DETECTIONS_HEADER = ["image_id", "x", "y", "w", "h", "score"]
INDEX_FORMAT = "openlogo-index/1"
UNIT_NORM_TOL = 1e-9


class RetrievalError(OpenLogoError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    detector_score: float = 1.0

    def __post_init__(self):
        s = self.detector_score
        if not isinstance(s, (int, float)) or not math.isfinite(s) or not 0.0 <= s <= 1.0:
            raise RetrievalError(f"detector score must be in [0, 1], got {s!r}")


@dataclass(frozen=True, eq=False)
class IndexEntry:
    detection: Detection
    roi_index: int
    feature: np.ndarray

    @property
    def image_id(self) -> str:
        return self.detection.image_id

    @property
    def box(self) -> Box:
        return self.detection.box


@dataclass(frozen=True)
class RankedMatch:
    entry: IndexEntry
    similarity: float


class Index:
    """Immutable exhaustive-scan index over unit-length features.

    Entries are ordered by image_id, then by detection input order; this
    order is also the tie-break for equal similarities.
    """

    def __init__(self, entries: Sequence[tuple[Detection, int]], features: np.ndarray,
                 dataset_name: str = "", dataset_version: str = "", extractor: str = ""):
        features = np.array(features, dtype=np.float64, ndmin=2)
        if len(entries) != features.shape[0]:
            raise RetrievalError(f"{len(entries)} detections but {features.shape[0]} feature rows")
        if len(entries) and np.any(np.abs(np.linalg.norm(features, axis=1) - 1.0) > UNIT_NORM_TOL):
            raise RetrievalError("index features must have unit norm")
        features.setflags(write=False)
        self.features = features
        self.dim = int(features.shape[1])
        self.dataset_name = dataset_name
        self.dataset_version = dataset_version
        self.extractor = extractor
        self.entries = tuple(
            IndexEntry(det, roi_index, features[i]) for i, (det, roi_index) in enumerate(entries)
        )

    def __len__(self) -> int:
        return len(self.entries)

    def similarities(self, query_feature) -> np.ndarray:
        if self.dim and np.shape(query_feature) != (self.dim,):
            raise RetrievalError(f"query dimension {np.shape(query_feature)} does not match index dim {self.dim}")
        q = l2_normalize(query_feature)
        if not len(self.entries):
            return np.zeros(0)
        return np.clip(self.features @ q, -1.0, 1.0)


# -- extractors -------------------------------------------------------------


class Extractor(Protocol):
    name: str

    def extract(self, record: ImageRecord, region: Box, roi_index: int) -> np.ndarray: ...


class BaselineExtractor:
    """Colour-grid descriptor over image pixels.

    Pixels come from ``images`` (image_id -> HxWx3 array) when given, else
    from ``image_root / record.path`` on disk.
    """

    name = "baseline"

    def __init__(self, image_root=None, images: Mapping[str, np.ndarray] | None = None, cache_size: int = 8):
        self.image_root = Path(image_root) if image_root is not None else None
        self.images = images
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._cache_size = cache_size

    def pixels(self, record: ImageRecord) -> np.ndarray:
        if self.images is not None and record.image_id in self.images:
            arr = self.images[record.image_id]
        elif record.image_id in self._cache:
            self._cache.move_to_end(record.image_id)
            arr = self._cache[record.image_id]
        else:
            if self.image_root is None:
                raise RetrievalError(f"missing image for {record.image_id!r}")
            path = self.image_root / record.path
            try:
                arr = load_image(path)
            except (OSError, ValueError) as exc:
                raise RetrievalError(f"missing image for {record.image_id!r}: cannot read {path}: {exc}") from None
            self._cache[record.image_id] = arr
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        if arr.shape[:2] != (record.height, record.width):
            raise RetrievalError(
                f"image {record.image_id!r} is {arr.shape[1]}x{arr.shape[0]}, annotation says {record.width}x{record.height}"
            )
        return arr

    def describe(self, image: np.ndarray, region: Box) -> np.ndarray:
        return baseline_descriptor(image, region)

    def extract(self, record: ImageRecord, region: Box, roi_index: int) -> np.ndarray:
        return self.describe(self.pixels(record), region)


class EmbeddingExtractor:
    """Looks features up in a precomputed table keyed by (image_id, roi_index)."""

    name = "embeddings"

    def __init__(self, table: EmbeddingTable):
        self.table = table

    def extract(self, record: ImageRecord, region: Box, roi_index: int) -> np.ndarray:
        key = (record.image_id, roi_index)
        if key not in self.table:
            raise RetrievalError(f"no embedding for {record.image_id},{roi_index}")
        return self.table[key]


# -- detection providers ----------------------------------------------------


def oracle_detections(dataset: Dataset) -> list[Detection]:
    """A perfect detector: every ground-truth RoI with score 1.0."""
    return [Detection(rec.image_id, Box(*roi.xywh), 1.0) for rec in dataset.images for roi in rec.rois]


def _format_coord(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format_float(v)


def _parse_coord(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def dumps_detections(detections: Iterable[Detection]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DETECTIONS_HEADER)
    for d in detections:
        writer.writerow([d.image_id, *map(_format_coord, d.box.xywh), format_float(d.detector_score)])
    return buf.getvalue()


def save_detections(detections: Iterable[Detection], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_detections(detections))


def load_detections(path) -> list[Detection]:
    """Read a detections CSV (header ``image_id,x,y,w,h,score``).

    Image ids are not checked here; unknown ids fail in :func:`build_index`.
    """
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return out
        if [h.strip() for h in header] != DETECTIONS_HEADER:
            raise RetrievalError(f"line 1: expected header {','.join(DETECTIONS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise RetrievalError(f"line {lineno}: expected 6 columns, got {len(row)}")
            try:
                box = Box(*(_parse_coord(v) for v in row[1:5]))
                out.append(Detection(row[0], box, float(row[5])))
            except (ValueError, OpenLogoError) as exc:
                raise RetrievalError(f"line {lineno}: {exc}") from None
    return out


# -- index ------------------------------------------------------------------


def build_index(
    dataset: Dataset,
    detections: Sequence[Detection],
    extractor: Extractor,
    min_detector_score: float | None = None,
) -> Index:
    """Describe every detection and collect the unit-normalized features.

    ``min_detector_score`` optionally drops low-confidence detections first.
    """
    records = dataset.by_id()
    unknown = sorted({d.image_id for d in detections} - records.keys())
    if unknown:
        raise RetrievalError(f"detections reference unknown images: {', '.join(unknown[:10])}")
    if min_detector_score is not None:
        detections = [d for d in detections if d.detector_score >= min_detector_score]
    ordered = sorted(detections, key=lambda d: d.image_id)  # stable: keeps input order per image

    keyed: list[tuple[Detection, int]] = []
    rows = []
    dim = None
    counter: dict[str, int] = {}
    for det in ordered:
        rec = records[det.image_id]
        if not det.box.within(rec.width, rec.height):
            raise RetrievalError(f"detection {det.box.xywh} outside image {det.image_id!r}")
        roi_index = counter.get(det.image_id, 0)
        counter[det.image_id] = roi_index + 1
        vec = l2_normalize(extractor.extract(rec, det.box, roi_index))
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise RetrievalError(f"extractor dimension drift: {vec.size} != {dim} at {det.image_id!r}")
        keyed.append((det, roi_index))
        rows.append(vec)
    features = np.vstack(rows) if rows else np.zeros((0, 0))
    return Index(keyed, features, dataset.name, dataset.version, getattr(extractor, "name", ""))


def query(index: Index, query_feature, min_similarity: float = -1.0, top_k: int | None = None) -> list[RankedMatch]:
    """Rank index entries by cosine similarity to ``query_feature``.

    Returns entries with similarity >= ``min_similarity`` in descending
    similarity order, ties in index order, truncated to ``top_k``.
    """
    if not -1.0 <= min_similarity <= 1.0:
        raise RetrievalError(f"min_similarity must be in [-1, 1], got {min_similarity}")
    if top_k is not None and top_k < 0:
        raise RetrievalError(f"top_k must be non-negative, got {top_k}")
    sims = index.similarities(query_feature)
    order = np.lexsort((np.arange(sims.size), -sims))
    order = order[sims[order] >= min_similarity]
    if top_k is not None:
        order = order[:top_k]
    entries = index.entries
    return [RankedMatch(entries[i], float(sims[i])) for i in order]


def query_from_region(
    index: Index,
    image: np.ndarray,
    region: Box,
    describe: Callable[[np.ndarray, Box], np.ndarray] = baseline_descriptor,
    min_similarity: float = -1.0,
    top_k: int | None = None,
) -> list[RankedMatch]:
    return query(index, describe(image, region), min_similarity, top_k)


def dumps_index(index: Index) -> str:
    header = {
        "format": INDEX_FORMAT,
        "dataset": index.dataset_name,
        "dataset_version": index.dataset_version,
        "extractor": index.extractor,
        "dim": index.dim,
        "entries": len(index),
        "detections": [
            [e.image_id, *e.box.xywh, e.detection.detector_score] for e in index.entries
        ],
    }
    buf = io.StringIO()
    buf.write(json.dumps(header, ensure_ascii=False, separators=(",", ":")) + "\n")
    write_embedding_rows(buf, index.dim, ((e.image_id, e.roi_index, e.feature) for e in index.entries))
    return buf.getvalue()


def save_index(index: Index, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_index(index))


def load_index(path) -> Index:
    with open(path, encoding="utf-8", newline="") as f:
        first = f.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise RetrievalError(f"line 1: bad index header: {exc.msg}") from None
        if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
            raise RetrievalError(f"line 1: not an index file (expected format {INDEX_FORMAT})")
        dim, rows = read_embedding_rows(f, start_line=2, min_dim=0)
    dets = header.get("detections", [])
    if len(rows) != len(dets) or len(rows) != header.get("entries"):
        raise RetrievalError(f"index header lists {len(dets)} detections but body has {len(rows)} rows")
    if dim != header.get("dim"):
        raise RetrievalError(f"index header dim {header.get('dim')} != body dim {dim}")
    keyed = []
    for i, ((image_id, roi_index, _), d) in enumerate(zip(rows, dets)):
        if d[0] != image_id:
            raise RetrievalError(f"index row {i}: body image_id {image_id!r} != header {d[0]!r}")
        keyed.append((Detection(d[0], Box(*d[1:5]), d[5]), roi_index))
    features = np.vstack([r[2] for r in rows]) if rows else np.zeros((0, dim))
    return Index(keyed, features, header.get("dataset", ""), header.get("dataset_version", ""), header.get("extractor", ""))

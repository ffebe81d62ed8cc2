"""Feature vectors: normalization, cosine similarity, the built-in colour
grid descriptor and the embedding CSV format used to ingest external CNN
features.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OpenLogoError
from .geometry import Box

__all__ = [
    "DESCRIPTOR_DIM",
    "EmbeddingError",
    "EmbeddingTable",
    "baseline_descriptor",
    "cosine_similarity",
    "dumps_embeddings",
    "l2_normalize",
    "load_embeddings",
    "load_image",
    "save_embeddings",
]

RESAMPLE_SIZE = 64
GRID = 4
BINS = 8
BIN_WIDTH = 256 // BINS
DESCRIPTOR_DIM = GRID * GRID * 3 * BINS

_CELL = RESAMPLE_SIZE // GRID
_NN_INDEX = np.arange(RESAMPLE_SIZE)


class EmbeddingError(OpenLogoError):
    pass


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise EmbeddingError(f"feature vector must be 1-D and non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError("feature vector contains non-finite values")
    return arr


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise EmbeddingError("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EmbeddingError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pixel_bounds(region: Box, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel rectangle (x0, y0, x1, y1) covering ``region``."""
    x0, y0 = math.floor(region.x), math.floor(region.y)
    x1, y1 = math.ceil(region.x + region.w), math.ceil(region.y + region.h)
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise OpenLogoError(f"region {region.xywh} out of bounds for {width}x{height} image")
    return x0, y0, x1, y1


def baseline_descriptor(image: np.ndarray, region: Box) -> np.ndarray:
    """Spatial colour histogram of an image region, 384-d and unit length.

    The region is resampled to 64x64 by nearest neighbour
    (``src = floor(len * i / 64)``), split into a 4x4 grid of cells, and each
    cell contributes an 8-bin histogram per channel (R, G, B; bin =
    value // 32) normalized by the cell's pixel count. Cells are concatenated
    in row-major order.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise OpenLogoError(f"expected an HxWx3 RGB image, got shape {image.shape}")
    height, width = image.shape[:2]
    x0, y0, x1, y1 = pixel_bounds(region, width, height)
    rows = y0 + ((y1 - y0) * _NN_INDEX) // RESAMPLE_SIZE
    cols = x0 + ((x1 - x0) * _NN_INDEX) // RESAMPLE_SIZE
    patch = image[np.ix_(rows, cols)]
    bins = np.asarray(patch, dtype=np.int64) // BIN_WIDTH
    if bins.min() < 0 or bins.max() >= BINS:
        raise OpenLogoError("pixel values must lie in [0, 255]")
    # (row cell, row in cell, col cell, col in cell, channel) -> (cell, pixel, channel)
    cells = bins.reshape(GRID, _CELL, GRID, _CELL, 3).transpose(0, 2, 1, 3, 4).reshape(GRID * GRID, _CELL * _CELL, 3)
    offsets = np.arange(GRID * GRID)[:, None, None] * (3 * BINS) + np.arange(3)[None, None, :] * BINS
    hist = np.bincount((cells + offsets).ravel(), minlength=DESCRIPTOR_DIM).astype(np.float64)
    hist /= _CELL * _CELL
    return hist / np.linalg.norm(hist)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# -- embedding tables -------------------------------------------------------

RoiKey = tuple[str, int]


@dataclass
class EmbeddingTable:
    """Externally computed features keyed by (image_id, roi_index)."""

    dim: int
    entries: dict[RoiKey, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.dim, int) or self.dim < 1:
            raise EmbeddingError(f"dim must be a positive integer, got {self.dim!r}")
        for key, vec in list(self.entries.items()):
            self.entries[key] = self._check(key, vec)

    def _check(self, key: RoiKey, vec) -> np.ndarray:
        vec = as_vector(vec)
        if vec.size != self.dim:
            raise EmbeddingError(f"entry {key}: expected {self.dim} values, got {vec.size}")
        return vec

    def add(self, image_id: str, roi_index: int, vec) -> None:
        key = (image_id, int(roi_index))
        if key in self.entries:
            raise EmbeddingError(f"duplicate roi_key {key}")
        self.entries[key] = self._check(key, vec)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, key: RoiKey) -> np.ndarray:
        return self.entries[key]

    def __contains__(self, key) -> bool:
        return key in self.entries


def format_float(value) -> str:
    # repr is the shortest string that parses back to the same double
    return repr(float(value))


def write_embedding_rows(f, dim: int, rows) -> None:
    f.write(f"dim={dim}\n")
    writer = csv.writer(f, lineterminator="\n")
    for image_id, roi_index, vec in rows:
        writer.writerow([image_id, roi_index, *map(format_float, vec)])


def read_embedding_rows(lines, start_line: int = 1, min_dim: int = 1):
    """Parse embedding CSV text. Returns (dim, [(image_id, roi_index, vector)])."""
    lines = iter(lines)
    header = next(lines, "").strip()
    if not header.startswith("dim="):
        raise EmbeddingError(f"line {start_line}: expected 'dim=N' header, got {header[:40]!r}")
    try:
        dim = int(header[4:])
    except ValueError:
        raise EmbeddingError(f"line {start_line}: bad dim header {header!r}") from None
    if dim < min_dim:
        raise EmbeddingError(f"line {start_line}: dim must be at least {min_dim}")
    rows = []
    for lineno, row in enumerate(csv.reader(lines), start=start_line + 1):
        if not row:
            continue
        if len(row) != dim + 2:
            raise EmbeddingError(f"line {lineno}: expected {dim} values, got {len(row) - 2}")
        try:
            roi_index = int(row[1])
            vec = np.array([float(v) for v in row[2:]])
        except ValueError as exc:
            raise EmbeddingError(f"line {lineno}: {exc}") from None
        if not np.all(np.isfinite(vec)):
            raise EmbeddingError(f"line {lineno}: non-finite value")
        rows.append((row[0], roi_index, vec))
    return dim, rows


def dumps_embeddings(table: EmbeddingTable) -> str:
    buf = io.StringIO()
    rows = ((k[0], k[1], table.entries[k]) for k in sorted(table.entries))
    write_embedding_rows(buf, table.dim, rows)
    return buf.getvalue()


def save_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_embeddings(table))


def load_embeddings(path) -> EmbeddingTable:
    with open(Path(path), encoding="utf-8", newline="") as f:
        dim, rows = read_embedding_rows(f)
    table = EmbeddingTable(dim)
    for image_id, roi_index, vec in rows:
        table.add(image_id, roi_index, vec)
    return table

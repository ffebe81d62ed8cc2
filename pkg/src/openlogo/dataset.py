"""Annotated logo datasets: model, JSONL/VOC I/O, statistics and splits.

A dataset is a list of images, each carrying zero or more pixel-coordinate
bounding boxes (RoIs) labelled with a brand. Images without RoIs are kept as
distractors.
"""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import OpenLogoError

__all__ = [
    "BrandLabel",
    "Dataset",
    "DatasetError",
    "DatasetStats",
    "ImageRecord",
    "LogoKind",
    "RoI",
    "dumps_dataset",
    "exclude_brands",
    "export_voc_xml",
    "fnv1a_64",
    "holdout_split",
    "import_voc_xml",
    "load_dataset",
    "merge",
    "normalize_brand",
    "parse_dataset",
    "save_dataset",
    "stats",
]

DEFAULT_BRAND_THRESHOLDS = (1, 2, 5, 10, 20, 50, 100)
HOLDOUT_BUCKETS = 10_000

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_VARIANT_SUFFIX = re.compile(r"^(.*)-(\d+)$")
_TEXT_SUFFIX = "-text"


class DatasetError(OpenLogoError):
    pass


class LogoKind(str, Enum):
    TEXTUAL = "textual"
    GRAPHICAL = "graphical"


def normalize_brand(brand: str) -> str:
    return brand.strip().lower()


@dataclass(frozen=True)
class BrandLabel:
    """Brand identity plus design metadata.

    Only ``brand`` takes part in retrieval identity; ``kind`` and ``variant``
    record which of a company's logo designs was annotated.
    """

    brand: str
    kind: LogoKind = LogoKind.GRAPHICAL
    variant: int = 0

    def __post_init__(self):
        if not isinstance(self.brand, str):
            raise DatasetError(f"brand must be a string, got {self.brand!r}")
        brand = normalize_brand(self.brand)
        if not brand:
            raise DatasetError("brand must be non-empty")
        object.__setattr__(self, "brand", brand)
        try:
            object.__setattr__(self, "kind", LogoKind(self.kind))
        except ValueError:
            raise DatasetError(f"kind must be 'textual' or 'graphical', got {self.kind!r}") from None
        if not _is_int(self.variant) or self.variant < 0:
            raise DatasetError(f"variant must be a non-negative integer, got {self.variant!r}")


@dataclass(frozen=True)
class RoI:
    x: int
    y: int
    w: int
    h: int
    label: BrandLabel

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if not _is_int(getattr(self, name)):
                raise DatasetError(f"RoI {name} must be an integer, got {getattr(self, name)!r}")
        if self.w <= 0 or self.h <= 0:
            raise DatasetError(f"RoI has non-positive size w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise DatasetError(f"RoI has negative origin x={self.x} y={self.y}")

    @property
    def brand(self) -> str:
        return self.label.brand

    @property
    def xywh(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    rois: tuple[RoI, ...] = ()

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id:
            raise DatasetError(f"image_id must be a non-empty string, got {self.image_id!r}")
        object.__setattr__(self, "rois", tuple(self.rois))
        for name in ("width", "height"):
            value = getattr(self, name)
            if not _is_int(value) or value <= 0:
                raise DatasetError(f"image {self.image_id!r}: {name} must be a positive integer, got {value!r}")
        for i, roi in enumerate(self.rois):
            if roi.x + roi.w > self.width or roi.y + roi.h > self.height:
                raise DatasetError(
                    f"image {self.image_id!r}: roi {i} RoI exceeds image bounds "
                    f"({roi.x},{roi.y},{roi.w},{roi.h}) in {self.width}x{self.height}"
                )


@dataclass(frozen=True)
class Dataset:
    name: str = ""
    version: str = ""
    images: tuple[ImageRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        seen = set()
        for rec in self.images:
            if rec.image_id in seen:
                raise DatasetError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.images)

    def by_id(self) -> dict[str, ImageRecord]:
        return {rec.image_id: rec for rec in self.images}

    def brands(self) -> set[str]:
        return {roi.brand for rec in self.images for roi in rec.rois}

    @property
    def n_rois(self) -> int:
        return sum(len(rec.rois) for rec in self.images)


@dataclass
class DatasetStats:
    n_brands: int = 0
    n_images: int = 0
    n_rois: int = 0
    rois_per_brand: dict[str, int] = field(default_factory=dict)
    rois_per_image_histogram: dict[int, int] = field(default_factory=dict)
    n_brands_with_at_least: dict[int, int] = field(default_factory=dict)
    max_rois_in_one_image: int = 0

    def to_json(self) -> dict:
        return {
            "n_brands": self.n_brands,
            "n_images": self.n_images,
            "n_rois": self.n_rois,
            "max_rois_in_one_image": self.max_rois_in_one_image,
            "n_brands_with_at_least": {str(k): v for k, v in sorted(self.n_brands_with_at_least.items())},
            "rois_per_image_histogram": {str(k): v for k, v in sorted(self.rois_per_image_histogram.items())},
            "rois_per_brand": dict(sorted(self.rois_per_brand.items())),
        }


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


# -- JSONL ------------------------------------------------------------------


def _roi_from_json(obj: dict) -> RoI:
    label = BrandLabel(
        brand=obj["brand"],
        kind=obj.get("kind", LogoKind.GRAPHICAL.value),
        variant=obj.get("variant", 0),
    )
    return RoI(obj["x"], obj["y"], obj["w"], obj["h"], label)


def _record_from_json(obj: dict) -> ImageRecord:
    if not isinstance(obj, dict):
        raise DatasetError("expected a JSON object")
    image_id = obj.get("image_id")
    try:
        rois = []
        for i, r in enumerate(obj.get("rois", [])):
            try:
                rois.append(_roi_from_json(r))
            except DatasetError as exc:
                raise DatasetError(f"image {image_id!r}: roi {i}: {exc}") from None
        return ImageRecord(
            image_id=image_id,
            path=obj.get("path", image_id),
            width=obj["width"],
            height=obj["height"],
            rois=rois,
        )
    except KeyError as exc:
        raise DatasetError(f"image {image_id!r}: missing field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise DatasetError(f"image {image_id!r}: {exc}") from None


def parse_dataset(lines: Iterable[str], name: str = "", version: str = "") -> Dataset:
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: parse error: {exc.msg}") from None
        try:
            rec = _record_from_json(obj)
        except DatasetError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
        if rec.image_id in seen:
            raise DatasetError(f"line {lineno}: duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        records.append(rec)
    return Dataset(name=name, version=version, images=tuple(records))


def load_dataset(path, name: str | None = None, version: str = "") -> Dataset:
    """Read a JSONL annotation file (one image per line).

    The dataset name defaults to the file stem.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        return parse_dataset(f, name=path.stem if name is None else name, version=version)


def _record_to_json(rec: ImageRecord) -> str:
    obj = {
        "image_id": rec.image_id,
        "path": rec.path,
        "width": rec.width,
        "height": rec.height,
        "rois": [
            {
                "x": r.x,
                "y": r.y,
                "w": r.w,
                "h": r.h,
                "brand": r.label.brand,
                "kind": r.label.kind.value,
                "variant": r.label.variant,
            }
            for r in rec.rois
        ],
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def dumps_dataset(dataset: Dataset) -> str:
    return "".join(_record_to_json(rec) + "\n" for rec in dataset.images)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_dataset(dataset))


# -- VOC XML ----------------------------------------------------------------


def parse_object_name(name: str) -> BrandLabel:
    """Map a VOC object name to a label.

    Names follow ``<brand>[-text][-<variant>]``, e.g. ``nike``, ``nike-text``,
    ``nike-2`` or ``nike-text-1``.
    """
    base = name.strip().lower()
    variant = 0
    m = _VARIANT_SUFFIX.match(base)
    if m and m.group(1):
        base, variant = m.group(1), int(m.group(2))
    kind = LogoKind.GRAPHICAL
    if base.endswith(_TEXT_SUFFIX) and len(base) > len(_TEXT_SUFFIX):
        base, kind = base[: -len(_TEXT_SUFFIX)], LogoKind.TEXTUAL
    return BrandLabel(base, kind, variant)


def format_object_name(label: BrandLabel) -> str:
    name = label.brand
    if label.kind is LogoKind.TEXTUAL:
        name += _TEXT_SUFFIX
    if label.variant:
        name += f"-{label.variant}"
    return name


def _voc_int(node, tag: str, where: str) -> int:
    el = node.find(tag)
    if el is None or el.text is None:
        raise DatasetError(f"{where}: missing <{tag}>")
    try:
        return int(round(float(el.text)))
    except ValueError:
        raise DatasetError(f"{where}: <{tag}> is not a number: {el.text!r}") from None


def _read_voc_file(xml_path: Path) -> ImageRecord:
    where = xml_path.name
    try:
        root = ET.parse(xml_path).getroot()
    except ET.ParseError as exc:
        raise DatasetError(f"{where}: malformed XML: {exc}") from None
    size = root.find("size")
    if size is None:
        raise DatasetError(f"{where}: missing <size>")
    width = _voc_int(size, "width", where)
    height = _voc_int(size, "height", where)
    rois = []
    for i, obj in enumerate(root.iter("object")):
        name = obj.findtext("name")
        if not name:
            raise DatasetError(f"{where}: object {i} has no <name>")
        box = obj.find("bndbox")
        if box is None:
            raise DatasetError(f"{where}: object {i} has no <bndbox>")
        xmin, ymin = _voc_int(box, "xmin", where), _voc_int(box, "ymin", where)
        xmax, ymax = _voc_int(box, "xmax", where), _voc_int(box, "ymax", where)
        if xmax <= xmin or ymax <= ymin:
            raise DatasetError(f"{where}: object {i} has xmax <= xmin or ymax <= ymin")
        rois.append(RoI(xmin, ymin, xmax - xmin, ymax - ymin, parse_object_name(name)))
    filename = root.findtext("filename") or xml_path.stem
    try:
        return ImageRecord(xml_path.stem, filename, width, height, tuple(rois))
    except DatasetError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def import_voc_xml(directory, name: str | None = None, version: str = "") -> Dataset:
    """Convert a directory of PASCAL VOC XML files to a Dataset.

    image_id is the XML file stem; boxes are converted from corner form
    (xmin, ymin, xmax, ymax) to (x, y, w, h).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory}: not a directory")
    records = [_read_voc_file(p) for p in sorted(directory.glob("*.xml"))]
    return Dataset(name=directory.name if name is None else name, version=version, images=records)


def export_voc_xml(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in dataset.images:
        root = ET.Element("annotation")
        ET.SubElement(root, "filename").text = rec.path
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(rec.width)
        ET.SubElement(size, "height").text = str(rec.height)
        ET.SubElement(size, "depth").text = "3"
        for roi in rec.rois:
            obj = ET.SubElement(root, "object")
            ET.SubElement(obj, "name").text = format_object_name(roi.label)
            box = ET.SubElement(obj, "bndbox")
            ET.SubElement(box, "xmin").text = str(roi.x)
            ET.SubElement(box, "ymin").text = str(roi.y)
            ET.SubElement(box, "xmax").text = str(roi.x + roi.w)
            ET.SubElement(box, "ymax").text = str(roi.y + roi.h)
        ET.ElementTree(root).write(directory / f"{rec.image_id}.xml", encoding="utf-8", xml_declaration=True)


# -- statistics and set operations ------------------------------------------


def stats(dataset: Dataset, thresholds: Iterable[int] = DEFAULT_BRAND_THRESHOLDS) -> DatasetStats:
    """Count brands, images and RoIs.

    ``n_brands_with_at_least[t]`` counts brands with at least ``t`` RoIs
    (not images).
    """
    per_brand = Counter(roi.brand for rec in dataset.images for roi in rec.rois)
    per_image = Counter(len(rec.rois) for rec in dataset.images)
    return DatasetStats(
        n_brands=len(per_brand),
        n_images=len(dataset.images),
        n_rois=sum(per_brand.values()),
        rois_per_brand=dict(sorted(per_brand.items())),
        rois_per_image_histogram=dict(sorted(per_image.items())),
        n_brands_with_at_least={t: sum(1 for c in per_brand.values() if c >= t) for t in sorted(set(thresholds))},
        max_rois_in_one_image=max(per_image, default=0),
    )


def exclude_brands(dataset: Dataset, brands: Iterable[str]) -> Dataset:
    """Remove every RoI of the given brands.

    Images that lose all their RoIs are dropped; images that had none to
    begin with (distractors) are kept.
    """
    excluded = {normalize_brand(b) for b in brands}
    if not excluded:
        return dataset
    images = []
    for rec in dataset.images:
        kept = tuple(r for r in rec.rois if r.brand not in excluded)
        if rec.rois and not kept:
            continue
        images.append(rec if len(kept) == len(rec.rois) else replace(rec, rois=kept))
    return replace(dataset, images=tuple(images))


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def in_holdout(image_id: str, fraction: float) -> bool:
    return fnv1a_64(image_id.encode("utf-8")) % HOLDOUT_BUCKETS < fraction * HOLDOUT_BUCKETS


def holdout_split(dataset: Dataset, fraction: float) -> tuple[Dataset, Dataset]:
    """Split images into (train, validation) by hashing image ids.

    An image is held out iff FNV-1a-64(image_id) mod 10000 < fraction * 10000,
    so the split depends only on the id and not on ordering or a seed.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DatasetError(f"holdout fraction must be in [0, 1], got {fraction}")
    train, val = [], []
    for rec in dataset.images:
        (val if in_holdout(rec.image_id, fraction) else train).append(rec)
    return replace(dataset, images=tuple(train)), replace(dataset, images=tuple(val))


def merge(a: Dataset, b: Dataset, name: str | None = None) -> Dataset:
    shared = a.by_id().keys() & b.by_id().keys()
    if shared:
        raise DatasetError(f"duplicate image_id in merge: {sorted(shared)[0]!r}")
    if name is None:
        name = a.name if not b.name or a.name == b.name else f"{a.name}+{b.name}" if a.name else b.name
    return Dataset(name=name, version=a.version, images=a.images + b.images)

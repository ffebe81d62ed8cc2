"""Command-line interface.

    openlogo stats DATASET
    openlogo import-voc DIR -o OUT.jsonl
    openlogo split DATASET --exclude-brands FILE --holdout-fraction 0.1 --train-out T --val-out V
    openlogo merge A B -o OUT.jsonl
    openlogo index DATASET --detections {oracle|PATH} --extractor {baseline|PATH} -o INDEX
    openlogo query INDEX (--image IMG --region X,Y,W,H | --embeddings CSV --key ID N | --feature V,...)
    openlogo evaluate INDEX TEST QUERIES --output-dir DIR

Exit status is 0 on success, 1 for bad input, 2 when an internal invariant
breaks.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .errors import InvariantError, OpenLogoError
from .eval import DEFAULT_FPPI_GRID, curve_csv, per_brand_ap_csv, run_open_set_protocol
from .features import load_embeddings, load_image
from .geometry import Box
from .retrieval import (
    BaselineExtractor,
    EmbeddingExtractor,
    build_index,
    load_detections,
    load_index,
    oracle_detections,
    query,
    save_index,
)

log = logging.getLogger("openlogo")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class UsageError(OpenLogoError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _ranged(lo, hi, lo_open=False, kind=float):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        below = v <= lo if lo_open else v < lo
        if below or (hi is not None and v > hi):
            lb = "(" if lo_open else "["
            ub = f"{hi}]" if hi is not None else "inf)"
            raise argparse.ArgumentTypeError(f"{v} out of range {lb}{lo}, {ub}")
        return v

    return parse


def _float_list(text):
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("fppi grid must be non-empty and non-negative")
    return values


def _float_feature(text):
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _region(text):
    try:
        return Box(*(float(t) if "." in t else int(t) for t in text.split(",")))
    except (TypeError, ValueError, OpenLogoError):
        raise argparse.ArgumentTypeError(f"expected X,Y,W,H with positive W,H, got {text!r}") from None


def _existing(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _summary(d: ds.Dataset) -> dict:
    return {"n_brands": len(d.brands()), "n_images": len(d), "n_rois": d.n_rois}


def _extractor(choice: str, image_root):
    if choice == "baseline":
        return BaselineExtractor(image_root=image_root)
    return EmbeddingExtractor(load_embeddings(_existing(choice, "embeddings file")))


# -- commands ---------------------------------------------------------------


def cmd_stats(args) -> int:
    d = ds.load_dataset(_existing(args.dataset))
    print(json.dumps(ds.stats(d, args.thresholds).to_json(), indent=2))
    return EXIT_OK


def cmd_import_voc(args) -> int:
    d = ds.import_voc_xml(_existing(args.directory, "directory"), name=args.name)
    ds.save_dataset(d, args.output)
    print(json.dumps(_summary(d)))
    return EXIT_OK


def cmd_split(args) -> int:
    d = ds.load_dataset(_existing(args.dataset))
    excluded: set[str] = set()
    if args.exclude_brands:
        text = _existing(args.exclude_brands).read_text(encoding="utf-8")
        excluded = {ds.normalize_brand(line) for line in text.splitlines() if line.strip() and not line.startswith("#")}
    kept = ds.exclude_brands(d, excluded)
    if d.n_rois and not kept.n_rois:
        log.warning("exclusion list covers every brand; outputs contain no RoIs")
    train, val = ds.holdout_split(kept, args.holdout_fraction)
    ds.save_dataset(train, args.train_out)
    ds.save_dataset(val, args.val_out)
    print(json.dumps({
        "excluded_brands": len(excluded),
        "remaining": _summary(kept),
        "train": _summary(train),
        "validation": _summary(val),
    }, indent=2))
    return EXIT_OK


def cmd_merge(args) -> int:
    merged = ds.load_dataset(_existing(args.inputs[0]))
    for path in args.inputs[1:]:
        merged = ds.merge(merged, ds.load_dataset(_existing(path)))
    ds.save_dataset(merged, args.output)
    print(json.dumps(_summary(merged)))
    return EXIT_OK


def cmd_index(args) -> int:
    dataset_path = _existing(args.dataset)
    image_root = Path(args.image_root) if args.image_root else dataset_path.parent
    d = ds.load_dataset(dataset_path)
    if args.detections == "oracle":
        dets = oracle_detections(d)
    else:
        dets = load_detections(_existing(args.detections, "detections file"))
    extractor = _extractor(args.extractor, image_root)
    try:
        index = build_index(d, dets, extractor, min_detector_score=args.min_detector_score)
    except OpenLogoError as exc:
        raise OpenLogoError(f"index build failed: {exc}") from None
    save_index(index, args.output)
    print(json.dumps({"entries": len(index), "dim": index.dim, "dataset": index.dataset_name}))
    return EXIT_OK


def cmd_query(args) -> int:
    index = load_index(_existing(args.index, "index file"))
    if args.image:
        if args.region is None:
            raise UsageError("--image requires --region")
        image = load_image(_existing(args.image, "image"))
        feature = BaselineExtractor().describe(image, args.region)
    elif args.embeddings:
        if args.key is None:
            raise UsageError("--embeddings requires --key IMAGE_ID ROI_INDEX")
        table = load_embeddings(_existing(args.embeddings, "embeddings file"))
        try:
            key = (args.key[0], int(args.key[1]))
        except ValueError:
            raise UsageError(f"roi index must be an integer, got {args.key[1]!r}") from None
        if key not in table:
            raise UsageError(f"no embedding row for {key[0]},{key[1]}")
        feature = table[key]
    else:
        feature = np.array(args.feature)
    matches = query(index, feature, args.min_similarity, args.top_k)

    out = open(args.output, "w", encoding="utf-8", newline="\n") if args.output else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["image_id", "x", "y", "w", "h", "similarity"])
        for m in matches:
            writer.writerow([m.entry.image_id, *m.entry.box.xywh, repr(m.similarity)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    index = load_index(_existing(args.index, "index file"))
    test = ds.load_dataset(_existing(args.test_dataset))
    query_path = _existing(args.query_set)
    queries = ds.load_dataset(query_path)
    image_root = Path(args.image_root) if args.image_root else query_path.parent
    if index.dataset_name != test.name:
        log.warning("index was built over %r, evaluating against %r", index.dataset_name, test.name)
    report = run_open_set_protocol(
        index,
        test,
        queries,
        _extractor(args.extractor, image_root),
        iou_threshold=args.iou_threshold,
        n_iterations=args.iterations,
        fppi_grid=args.fppi_grid,
        interpolated_ap=args.ap_mode == "11point",
    )
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "report.json", report.dumps())
    _write(out / "mean_curve.csv", curve_csv(report.mean_curve, report.curve_std))
    _write(out / "per_brand_ap.csv", per_brand_ap_csv(report))
    print(json.dumps({"map": report.map, "map_std": report.map_std, "n_iterations": len(report.iteration_maps)}))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="openlogo", description="Open-set logo retrieval and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stats", help="dataset statistics as JSON")
    s.add_argument("dataset")
    s.add_argument("--thresholds", type=lambda t: [int(x) for x in t.split(",")], default=list(ds.DEFAULT_BRAND_THRESHOLDS),
                   help="RoI-count thresholds for n_brands_with_at_least")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("import-voc", help="convert a directory of VOC XML files to JSONL")
    s.add_argument("directory")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--name")
    s.set_defaults(func=cmd_import_voc)

    s = sub.add_parser("split", help="remove brands, then hold out a validation fraction")
    s.add_argument("dataset")
    s.add_argument("--exclude-brands", metavar="FILE", help="one brand per line")
    s.add_argument("--holdout-fraction", type=_ranged(0.0, 1.0), default=0.1)
    s.add_argument("--train-out", required=True)
    s.add_argument("--val-out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("merge", help="union of datasets with disjoint image ids")
    s.add_argument("inputs", nargs="+")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("index", help="detect, describe and index logos")
    s.add_argument("dataset")
    s.add_argument("--detections", default="oracle", help="'oracle' or a detections CSV")
    s.add_argument("--extractor", default="baseline", help="'baseline' or an embeddings CSV")
    s.add_argument("--image-root", help="directory image paths are relative to (default: dataset dir)")
    s.add_argument("--min-detector-score", type=_ranged(0.0, 1.0), default=None)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("query", help="rank indexed logos against one query")
    s.add_argument("index")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="query image file (use with --region)")
    src.add_argument("--embeddings", help="embeddings CSV holding the query row (use with --key)")
    src.add_argument("--feature", type=_float_feature, help="comma-separated feature values")
    s.add_argument("--region", type=_region)
    s.add_argument("--key", nargs=2, metavar=("IMAGE_ID", "ROI_INDEX"))
    s.add_argument("--min-similarity", type=_ranged(-1.0, 1.0), default=-1.0)
    s.add_argument("--top-k", type=_ranged(0, None, kind=int), default=None)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("evaluate", help="run the single-query open-set protocol")
    s.add_argument("index")
    s.add_argument("test_dataset")
    s.add_argument("query_set")
    s.add_argument("--extractor", default="baseline", help="'baseline' or an embeddings CSV with query rows")
    s.add_argument("--image-root", help="root for query images (default: query set dir)")
    s.add_argument("--iou-threshold", type=_ranged(0.0, 1.0, lo_open=True), default=0.5)
    s.add_argument("--fppi-grid", type=_float_list, default=list(DEFAULT_FPPI_GRID))
    s.add_argument("--iterations", type=_ranged(1, None, kind=int), default=None)
    s.add_argument("--ap-mode", choices=["uninterpolated", "11point"], default="uninterpolated")
    s.add_argument("--output-dir", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"openlogo: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (OpenLogoError, OSError) as exc:
        print(f"openlogo: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

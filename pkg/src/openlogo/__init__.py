"""Open-set logo retrieval: dataset tooling, query-by-example search over
detected logos, and FROC / mAP evaluation."""

from .dataset import (
    BrandLabel,
    Dataset,
    DatasetStats,
    ImageRecord,
    LogoKind,
    RoI,
    exclude_brands,
    holdout_split,
    import_voc_xml,
    load_dataset,
    merge,
    save_dataset,
    stats,
)
from .errors import InvariantError, OpenLogoError
from .eval import (
    EvalReport,
    FrocCurve,
    average_precision,
    detection_froc,
    identification_froc,
    operating_point,
    run_open_set_protocol,
)
from .features import (
    EmbeddingTable,
    baseline_descriptor,
    cosine_similarity,
    l2_normalize,
    load_embeddings,
    save_embeddings,
)
from .geometry import Box, MatchResult, greedy_match, iou
from .retrieval import (
    BaselineExtractor,
    Detection,
    EmbeddingExtractor,
    Index,
    RankedMatch,
    build_index,
    load_detections,
    load_index,
    oracle_detections,
    query,
    query_from_region,
    save_detections,
    save_index,
)

__version__ = "0.1.0"

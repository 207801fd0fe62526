"""Training-free few-shot object detection by prototype matching.

Class prototypes are the means of L2-normalized support embeddings. Query
scenes arrive as class-agnostic mask proposals with crop embeddings; each
proposal is scored against every prototype, gated on a filter score, ranked
by a mean-corrected confidence, deduplicated with class-wise NMS, and the
surviving detections are written in the BOP result convention and evaluated
with AP averaged over IoU thresholds 0.50:0.05:0.95.
"""

from .errors import (
    BadMagicError,
    CorruptError,
    DimensionMismatchError,
    DuplicateClassError,
    EmptyMaskError,
    EngineError,
    FormatError,
    MalformedRleError,
    MissingEmbeddingsError,
    SchemaViolationError,
    UnknownClassError,
    VersionMismatchError,
    ZeroVectorError,
)
from .evaluation import (
    FP,
    IGNORED,
    IOU_THRESHOLDS,
    TP,
    ApReport,
    DetectionRecord,
    GroundTruthAnnotation,
    GroundTruthSet,
    average_precision,
    evaluate,
    evaluate_runs,
    match_detections,
    records_from_runs,
)
from .formats import (
    BopResultRecord,
    EmbeddingArchive,
    ImageEntry,
    ProposalKey,
    ProposalRecord,
    SupportKey,
    Violation,
    ap_report_csv,
    attach_embeddings,
    dump_config,
    format_ap_table,
    group_proposals,
    load_config,
    proposal_record,
    read_bop_results,
    read_embedding_archive,
    read_ground_truth,
    read_proposal_archive,
    runs_to_results,
    sidecar_path,
    sniff_format,
    validate,
    write_ap_report,
    write_bop_results,
    write_config,
    write_embedding_archive,
    write_ground_truth,
    write_proposal_archive,
)
from .geometry import (
    BinaryMask,
    BoundingBox,
    MaskProposal,
    box_iou,
    mask_to_bbox,
    nms,
    rle_decode,
    rle_encode,
)
from .pipeline import (
    Detection,
    DetectionRun,
    PipelineConfig,
    ProposalBatch,
    detect,
    filter_proposals,
    identify,
)
from .prototypes import (
    Prototype,
    PrototypeStore,
    SupportSet,
    build_prototype,
    build_store,
    load_store,
    prototype_similarity_matrix,
    save_store,
)
from .scoring import (
    SimilarityRow,
    cosine_scores,
    filter_score,
    final_score,
    l2_normalize,
    mean_corrected,
    score_against,
    softmax_max,
)

__version__ = "0.1.0"

"""Per-image detection: proposal filtering, prototype identification, class-wise NMS.

The per-image flow is: drop proposals below the minimum area ratio, drop
proposals below the generator quality floors, run NMS at ``theta_nms`` over
the survivors (scored by generator_iou), identify each retained proposal
against the prototype store, gate on the filter score at ``tau`` (retained on
equality), then suppress duplicates independently within each predicted class.
Cross-class overlaps are never suppressed. Everything is deterministic and
pure, so images may be processed concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError, MissingEmbeddingsError
from .geometry import BoundingBox, MaskProposal, nms
from .prototypes import PrototypeStore
from .scoring import (
    filter_score,
    final_score,
    l2_normalize,
    mean_corrected,
    score_against,
    softmax_max,
)


@dataclass(frozen=True)
class PipelineConfig:
    """Matching thresholds; defaults are the recommended operating point."""

    min_area_ratio: float = 0.0005
    min_generator_iou: float = 0.60
    min_stability: float = 0.85
    theta_nms: float = 0.75
    tau: float = 0.4
    classwise_nms_iou: float = 0.5

    def __post_init__(self) -> None:
        for name in (
            "min_area_ratio",
            "min_generator_iou",
            "min_stability",
            "theta_nms",
            "tau",
            "classwise_nms_iou",
        ):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class ProposalBatch:
    """All proposals of one image, optionally with their crop embeddings.

    ``embeddings`` is parallel to ``proposals``; entries may be None for
    proposals that were filtered out before embedding (two-stage workflow).
    """

    scene_id: int
    image_id: int
    image_width: int
    image_height: int
    proposals: tuple[MaskProposal, ...]
    embeddings: tuple[np.ndarray | None, ...] | None = None

    def __post_init__(self) -> None:
        if self.scene_id < 0 or self.image_id < 0:
            raise ValueError(f"scene/image ids must be non-negative, got {self.scene_id}/{self.image_id}")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError(f"image dimensions must be positive, got {self.image_width}x{self.image_height}")
        object.__setattr__(self, "proposals", tuple(self.proposals))
        for index, proposal in enumerate(self.proposals):
            if proposal.mask.width != self.image_width or proposal.mask.height != self.image_height:
                raise ValueError(
                    f"proposal {index} mask is {proposal.mask.width}x{proposal.mask.height}, "
                    f"image is {self.image_width}x{self.image_height}"
                )
        if self.embeddings is not None:
            embeddings = tuple(
                None if e is None else np.asarray(e, dtype=np.float64) for e in self.embeddings
            )
            object.__setattr__(self, "embeddings", embeddings)
            if len(embeddings) != len(self.proposals):
                raise ValueError(
                    f"{len(embeddings)} embeddings for {len(self.proposals)} proposals"
                )
            dims = {e.shape[0] for e in embeddings if e is not None}
            if len(dims) > 1:
                raise DimensionMismatchError(f"embeddings disagree on dimension: {sorted(dims)}")


@dataclass(frozen=True)
class Detection:
    """One identified object: box, class, ranking score, and score breakdown."""

    bbox: BoundingBox
    class_id: int
    score: float
    s_max: float
    p_max: float
    s_mc: float
    s_filter: float


@dataclass(frozen=True)
class DetectionRun:
    """The detection set of one image, ready for result serialization."""

    scene_id: int
    image_id: int
    detections: tuple[Detection, ...] = field(default_factory=tuple)
    time_s: float = -1.0


def filter_proposals(batch: ProposalBatch, cfg: PipelineConfig) -> list[int]:
    """Indices (ascending) of proposals surviving area, score, and NMS filters."""
    area_floor = cfg.min_area_ratio * batch.image_width * batch.image_height
    survivors = [
        i
        for i, p in enumerate(batch.proposals)
        if p.area_px >= area_floor
        and p.generator_iou >= cfg.min_generator_iou
        and p.stability >= cfg.min_stability
    ]
    items = [(batch.proposals[i].bbox, batch.proposals[i].generator_iou) for i in survivors]
    kept = nms(items, cfg.theta_nms)
    return sorted(survivors[k] for k in kept)


def _embedding_for(batch: ProposalBatch, index: int) -> np.ndarray:
    if batch.embeddings is None or batch.embeddings[index] is None:
        raise MissingEmbeddingsError(
            f"no embedding for scene {batch.scene_id} image {batch.image_id} "
            f"proposal {index}"
        )
    return batch.embeddings[index]


def identify(batch: ProposalBatch, store: PrototypeStore, cfg: PipelineConfig) -> list[Detection]:
    """Classify every proposal in the batch and keep confident detections.

    The batch is expected to contain already-filtered proposals, each with an
    embedding. Survivors are returned sorted by score descending (ties by
    input order).
    """
    class_ids = store.class_ids
    matrix = store.matrix
    candidates: list[tuple[int, Detection]] = []
    for index in range(len(batch.proposals)):
        embedding = _embedding_for(batch, index)
        z = l2_normalize(embedding)
        row = score_against(z, class_ids, matrix)
        s_max = row.s_max
        p_max = softmax_max(row.scores)
        s_filter = filter_score(s_max, p_max)
        if s_filter < cfg.tau:
            continue
        s_mc = mean_corrected(row)
        candidates.append(
            (
                index,
                Detection(
                    bbox=batch.proposals[index].bbox,
                    class_id=row.predicted_class,
                    score=final_score(s_max, p_max, s_mc),
                    s_max=s_max,
                    p_max=p_max,
                    s_mc=s_mc,
                    s_filter=s_filter,
                ),
            )
        )

    survivors: list[tuple[int, Detection]] = []
    for class_id in sorted({det.class_id for _, det in candidates}):
        group = [(i, det) for i, det in candidates if det.class_id == class_id]
        kept = nms([(det.bbox, det.score) for _, det in group], cfg.classwise_nms_iou)
        survivors.extend(group[k] for k in kept)

    survivors.sort(key=lambda pair: (-pair[1].score, pair[0]))
    return [det for _, det in survivors]


def detect(batch: ProposalBatch, store: PrototypeStore, cfg: PipelineConfig) -> DetectionRun:
    """Full per-image pass: geometric filtering, then identification."""
    retained = filter_proposals(batch, cfg)
    for index in retained:
        _embedding_for(batch, index)
    sub_batch = ProposalBatch(
        scene_id=batch.scene_id,
        image_id=batch.image_id,
        image_width=batch.image_width,
        image_height=batch.image_height,
        proposals=tuple(batch.proposals[i] for i in retained),
        embeddings=tuple(batch.embeddings[i] for i in retained) if retained else (),
    )
    detections = identify(sub_batch, store, cfg)
    return DetectionRun(
        scene_id=batch.scene_id,
        image_id=batch.image_id,
        detections=tuple(detections),
    )

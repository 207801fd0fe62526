"""Readers and writers for every interchange file the engine consumes or emits.

Formats:

- Embedding archive (binary, magic ``DPME``): header ``magic(4) version(u16)
  dim(u32) count(u64) dtype(u8)`` with dtype tag 0 = f32 and 1 = f64, followed
  by count x dim values, all little-endian. A JSON sidecar at ``path + ".json"``
  carries the extractor id, the crop policy string, the storage dtype name,
  and one key object per record (either scene_id/image_id/proposal_index or
  class_id/support_index). Values are promoted to f64 on read regardless of
  storage dtype.
- Proposal archive: JSON lines, one object per proposal with scene_id,
  image_id, width, height, rle, generator_iou, stability. The quality scores
  may be absent and default to 1.0 so pure-geometry archives still flow.
- BOP result file: one JSON array of detection objects sorted by
  (scene_id, image_id, descending score). ``time`` is -1.0 unless measured.
- Ground truth: COCO-style JSON object with categories, images (scene_id,
  image_id, width, height), and annotations carrying scene_id, image_id,
  category_id, bbox, and an optional ignore flag.
- Run config: TOML with a single ``[pipeline]`` table mirroring PipelineConfig.

Every writer goes through a sibling temp file plus rename, so a crashed run
never leaves a partial file behind. JSON numbers are emitted by the standard
serializer (shortest roundtrip decimal, locale-independent).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, fields
from typing import Iterable, Sequence, Union

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import (
    BadMagicError,
    CorruptError,
    EmptyMaskError,
    FormatError,
    MalformedRleError,
    SchemaViolationError,
    VersionMismatchError,
)
from .evaluation import ApReport, GroundTruthAnnotation, GroundTruthSet
from .geometry import BinaryMask, BoundingBox, MaskProposal
from .ioutil import atomic_write_bytes, atomic_write_text
from .pipeline import DetectionRun, PipelineConfig, ProposalBatch

ARCHIVE_MAGIC = b"DPME"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<4sHIQB")
_DTYPE_BY_TAG = {0: "f32", 1: "f64"}
_TAG_BY_DTYPE = {name: tag for tag, name in _DTYPE_BY_TAG.items()}
_NP_BY_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


# ---------------------------------------------------------------------------
# embedding archive


@dataclass(frozen=True, order=True)
class SupportKey:
    """Identifies one support crop of one class."""

    class_id: int
    support_index: int

    def __post_init__(self) -> None:
        if self.class_id < 1:
            raise ValueError(f"class_id must be positive, got {self.class_id}")
        if self.support_index < 0:
            raise ValueError(f"support_index must be non-negative, got {self.support_index}")

    def to_json(self) -> dict:
        return {"class_id": self.class_id, "support_index": self.support_index}


@dataclass(frozen=True, order=True)
class ProposalKey:
    """Identifies one proposal crop by its position within its image's archive group."""

    scene_id: int
    image_id: int
    proposal_index: int

    def __post_init__(self) -> None:
        for name in ("scene_id", "image_id", "proposal_index"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "image_id": self.image_id,
            "proposal_index": self.proposal_index,
        }


ArchiveKey = Union[SupportKey, ProposalKey]


class EmbeddingArchive:
    """In-memory view of one embedding archive: keyed rows of one dtype."""

    def __init__(
        self,
        keys: Sequence[ArchiveKey],
        matrix: np.ndarray,
        extractor: str = "",
        crop_policy: str = "",
        storage_dtype: str = "f32",
    ) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got shape {matrix.shape}")
        if matrix.shape[1] < 1:
            raise ValueError("embedding dimension must be at least 1")
        if len(keys) != matrix.shape[0]:
            raise ValueError(f"{len(keys)} keys for {matrix.shape[0]} rows")
        if storage_dtype not in _TAG_BY_DTYPE:
            raise ValueError(f"storage_dtype must be one of {sorted(_TAG_BY_DTYPE)}, got {storage_dtype!r}")
        kinds = {type(k) for k in keys}
        if len(kinds) > 1:
            raise ValueError("archive keys must be all-support or all-proposal, not mixed")
        if kinds and kinds != {SupportKey} and kinds != {ProposalKey}:
            raise TypeError(f"unsupported key type {kinds.pop().__name__}")
        self.keys: tuple[ArchiveKey, ...] = tuple(keys)
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("archive keys must be unique")
        matrix = matrix.copy()
        matrix.flags.writeable = False
        self.matrix = matrix
        self.extractor = extractor
        self.crop_policy = crop_policy
        self.storage_dtype = storage_dtype
        self._index = {key: row for row, key in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: ArchiveKey) -> bool:
        return key in self._index

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def lookup(self, key: ArchiveKey) -> np.ndarray:
        return self.matrix[self._index[key]]


def sidecar_path(path: str | os.PathLike) -> str:
    return os.fspath(path) + ".json"


def write_embedding_archive(archive: EmbeddingArchive, path: str | os.PathLike) -> None:
    """Write the binary payload and its JSON sidecar, both atomically."""
    header = _HEADER.pack(
        ARCHIVE_MAGIC,
        ARCHIVE_VERSION,
        archive.dim,
        len(archive),
        _TAG_BY_DTYPE[archive.storage_dtype],
    )
    payload = archive.matrix.astype(_NP_BY_DTYPE[archive.storage_dtype]).tobytes()
    atomic_write_bytes(path, header + payload)
    sidecar = {
        "extractor": archive.extractor,
        "crop_policy": archive.crop_policy,
        "storage_dtype": archive.storage_dtype,
        "keys": [key.to_json() for key in archive.keys],
    }
    atomic_write_text(sidecar_path(path), json.dumps(sidecar, indent=1) + "\n")


def _require_int(obj: dict, field: str, where: str, minimum: int = 0) -> int:
    value = obj.get(field)
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaViolationError(f"{where}: field {field!r} must be an integer, got {value!r}")
    if value < minimum:
        raise SchemaViolationError(f"{where}: field {field!r} must be >= {minimum}, got {value}")
    return value


def _parse_archive_key(obj: object, where: str) -> ArchiveKey:
    if not isinstance(obj, dict):
        raise SchemaViolationError(f"{where}: key must be an object, got {type(obj).__name__}")
    names = set(obj)
    if names == {"class_id", "support_index"}:
        return SupportKey(
            class_id=_require_int(obj, "class_id", where, minimum=1),
            support_index=_require_int(obj, "support_index", where),
        )
    if names == {"scene_id", "image_id", "proposal_index"}:
        return ProposalKey(
            scene_id=_require_int(obj, "scene_id", where),
            image_id=_require_int(obj, "image_id", where),
            proposal_index=_require_int(obj, "proposal_index", where),
        )
    raise SchemaViolationError(
        f"{where}: key fields must be class_id/support_index or scene_id/image_id/proposal_index, got {sorted(names)}"
    )


def _read_archive_header(path: str | os.PathLike) -> tuple[str, np.ndarray]:
    """Binary half of the archive read: (storage dtype name, f64 matrix)."""
    with open(path, "rb") as handle:
        data = handle.read()
    if len(data) < 4:
        raise CorruptError(f"{path}: file shorter than the magic header")
    if data[:4] != ARCHIVE_MAGIC:
        raise BadMagicError(f"{path}: expected magic {ARCHIVE_MAGIC!r}, found {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise CorruptError(f"{path}: truncated header ({len(data)} bytes)")
    _, version, dim, count, tag = _HEADER.unpack_from(data)
    if version != ARCHIVE_VERSION:
        raise VersionMismatchError(f"{path}: archive version {version}, reader supports {ARCHIVE_VERSION}")
    if dim < 1:
        raise CorruptError(f"{path}: embedding dimension 0")
    if tag not in _DTYPE_BY_TAG:
        raise CorruptError(f"{path}: unknown dtype tag {tag}")
    dtype_name = _DTYPE_BY_TAG[tag]
    np_dtype = _NP_BY_DTYPE[dtype_name]
    expected = count * dim * np_dtype.itemsize
    body = data[_HEADER.size :]
    if len(body) != expected:
        raise CorruptError(
            f"{path}: header declares {count} x {dim} {dtype_name} values "
            f"({expected} bytes), payload holds {len(body)}"
        )
    values = np.frombuffer(body, dtype=np_dtype).reshape(count, dim).astype(np.float64)
    return dtype_name, values


def _read_archive_sidecar(path: str | os.PathLike) -> dict:
    meta_path = sidecar_path(path)
    if not os.path.exists(meta_path):
        raise SchemaViolationError(f"{path}: missing sidecar {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as handle:
        try:
            meta = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaViolationError(f"{meta_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(meta, dict):
        raise SchemaViolationError(f"{meta_path}: sidecar must be a JSON object")
    for field in ("extractor", "crop_policy", "storage_dtype"):
        if not isinstance(meta.get(field), str):
            raise SchemaViolationError(f"{meta_path}: field {field!r} must be a string")
    if not isinstance(meta.get("keys"), list):
        raise SchemaViolationError(f"{meta_path}: field 'keys' must be a list")
    return meta


def read_embedding_archive(path: str | os.PathLike) -> EmbeddingArchive:
    """Read archive plus sidecar; embeddings come back as float64 rows."""
    dtype_name, values = _read_archive_header(path)
    meta = _read_archive_sidecar(path)
    if meta["storage_dtype"] != dtype_name:
        raise SchemaViolationError(
            f"{sidecar_path(path)}: sidecar declares {meta['storage_dtype']}, header says {dtype_name}"
        )
    if len(meta["keys"]) != values.shape[0]:
        raise SchemaViolationError(
            f"{sidecar_path(path)}: {len(meta['keys'])} keys for {values.shape[0]} records"
        )
    keys = [_parse_archive_key(obj, f"{sidecar_path(path)}: key {i}") for i, obj in enumerate(meta["keys"])]
    seen: set[ArchiveKey] = set()
    for i, key in enumerate(keys):
        if key in seen:
            raise SchemaViolationError(f"{sidecar_path(path)}: key {i} duplicates {key}")
        seen.add(key)
    try:
        return EmbeddingArchive(
            keys=keys,
            matrix=values,
            extractor=meta["extractor"],
            crop_policy=meta["crop_policy"],
            storage_dtype=dtype_name,
        )
    except ValueError as exc:
        raise SchemaViolationError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# proposal archive (JSON lines)


@dataclass(frozen=True)
class ProposalRecord:
    """One proposal as stored on disk, tied to its image."""

    scene_id: int
    image_id: int
    width: int
    height: int
    rle: tuple[int, ...]
    generator_iou: float = 1.0
    stability: float = 1.0

    def to_proposal(self) -> MaskProposal:
        return MaskProposal(
            mask=BinaryMask(width=self.width, height=self.height, runs=self.rle),
            generator_iou=self.generator_iou,
            stability=self.stability,
        )


def proposal_record(scene_id: int, image_id: int, proposal: MaskProposal) -> ProposalRecord:
    return ProposalRecord(
        scene_id=scene_id,
        image_id=image_id,
        width=proposal.mask.width,
        height=proposal.mask.height,
        rle=proposal.mask.runs,
        generator_iou=proposal.generator_iou,
        stability=proposal.stability,
    )


def write_proposal_archive(records: Iterable[ProposalRecord], path: str | os.PathLike) -> None:
    lines = []
    for record in records:
        lines.append(
            json.dumps(
                {
                    "scene_id": record.scene_id,
                    "image_id": record.image_id,
                    "width": record.width,
                    "height": record.height,
                    "rle": list(record.rle),
                    "generator_iou": record.generator_iou,
                    "stability": record.stability,
                }
            )
        )
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def _require_number(obj: dict, field: str, where: str, default: float | None = None) -> float:
    if field not in obj and default is not None:
        return default
    value = obj.get(field)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise SchemaViolationError(f"{where}: field {field!r} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise SchemaViolationError(f"{where}: field {field!r} must be finite, got {value}")
    return value


def _parse_proposal_line(obj: object, where: str) -> ProposalRecord:
    if not isinstance(obj, dict):
        raise SchemaViolationError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    rle = obj.get("rle")
    if not isinstance(rle, list) or not all(
        isinstance(r, int) and not isinstance(r, bool) and r >= 0 for r in rle
    ):
        raise SchemaViolationError(f"{where}: field 'rle' must be a list of non-negative integers")
    record = ProposalRecord(
        scene_id=_require_int(obj, "scene_id", where),
        image_id=_require_int(obj, "image_id", where),
        width=_require_int(obj, "width", where, minimum=1),
        height=_require_int(obj, "height", where, minimum=1),
        rle=tuple(rle),
        generator_iou=_require_number(obj, "generator_iou", where, default=1.0),
        stability=_require_number(obj, "stability", where, default=1.0),
    )
    try:
        record.to_proposal()
    except (MalformedRleError, EmptyMaskError, ValueError) as exc:
        raise SchemaViolationError(f"{where}: {exc}") from exc
    return record


def read_proposal_archive(path: str | os.PathLike) -> list[ProposalRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolationError(f"{where}: invalid JSON: {exc.msg}") from exc
            records.append(_parse_proposal_line(obj, where))
    return records


def group_proposals(records: Sequence[ProposalRecord]) -> list[ProposalBatch]:
    """Batch records by (scene_id, image_id), preserving file order in-group.

    A proposal's index within its group is the proposal_index that embedding
    archives key on, so grouping must not reorder records.
    """
    groups: dict[tuple[int, int], list[ProposalRecord]] = {}
    for record in records:
        groups.setdefault((record.scene_id, record.image_id), []).append(record)
    batches = []
    for scene_id, image_id in sorted(groups):
        members = groups[(scene_id, image_id)]
        dims = {(r.width, r.height) for r in members}
        if len(dims) > 1:
            raise SchemaViolationError(
                f"scene {scene_id} image {image_id}: proposals disagree on image size: {sorted(dims)}"
            )
        (width, height) = dims.pop()
        batches.append(
            ProposalBatch(
                scene_id=scene_id,
                image_id=image_id,
                image_width=width,
                image_height=height,
                proposals=tuple(r.to_proposal() for r in members),
            )
        )
    return batches


def attach_embeddings(batch: ProposalBatch, archive: EmbeddingArchive) -> ProposalBatch:
    """Return a copy of the batch with archive rows slotted in by proposal index.

    Proposals without a matching key get None; the pipeline raises
    MissingEmbeddings only if such a proposal survives filtering.
    """
    rows: list[np.ndarray | None] = []
    for index in range(len(batch.proposals)):
        key = ProposalKey(scene_id=batch.scene_id, image_id=batch.image_id, proposal_index=index)
        rows.append(archive.lookup(key) if key in archive else None)
    return ProposalBatch(
        scene_id=batch.scene_id,
        image_id=batch.image_id,
        image_width=batch.image_width,
        image_height=batch.image_height,
        proposals=batch.proposals,
        embeddings=tuple(rows),
    )


# ---------------------------------------------------------------------------
# BOP result file


@dataclass(frozen=True)
class BopResultRecord:
    """One detection row of a result file."""

    scene_id: int
    image_id: int
    category_id: int
    bbox: BoundingBox
    score: float
    time_s: float = -1.0


def runs_to_results(runs: Iterable[DetectionRun]) -> list[BopResultRecord]:
    return [
        BopResultRecord(
            scene_id=run.scene_id,
            image_id=run.image_id,
            category_id=det.class_id,
            bbox=det.bbox,
            score=det.score,
            time_s=run.time_s,
        )
        for run in runs
        for det in run.detections
    ]


def write_bop_results(records: Sequence[BopResultRecord], path: str | os.PathLike) -> None:
    """Write the result array sorted by (scene_id, image_id, score descending)."""
    ordered = sorted(records, key=lambda r: (r.scene_id, r.image_id, -r.score))
    payload = [
        {
            "scene_id": r.scene_id,
            "image_id": r.image_id,
            "category_id": r.category_id,
            "bbox": r.bbox.as_list(),
            "score": r.score,
            "time": r.time_s,
        }
        for r in ordered
    ]
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def _parse_result_record(obj: object, where: str) -> BopResultRecord:
    if not isinstance(obj, dict):
        raise SchemaViolationError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    bbox = obj.get("bbox")
    if (
        not isinstance(bbox, list)
        or len(bbox) != 4
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in bbox)
    ):
        raise SchemaViolationError(f"{where}: field 'bbox' must be a list of 4 integers")
    try:
        box = BoundingBox(x=bbox[0], y=bbox[1], w=bbox[2], h=bbox[3])
    except ValueError as exc:
        raise SchemaViolationError(f"{where}: {exc}") from exc
    return BopResultRecord(
        scene_id=_require_int(obj, "scene_id", where),
        image_id=_require_int(obj, "image_id", where),
        category_id=_require_int(obj, "category_id", where, minimum=1),
        bbox=box,
        score=_require_number(obj, "score", where),
        time_s=_require_number(obj, "time", where, default=-1.0),
    )


def read_bop_results(path: str | os.PathLike) -> list[BopResultRecord]:
    """Read a result file; record order is preserved, sortedness not required."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaViolationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(payload, list):
        raise SchemaViolationError(f"{path}: top level must be a JSON array")
    return [_parse_result_record(obj, f"{path}: record {i}") for i, obj in enumerate(payload)]


# ---------------------------------------------------------------------------
# ground truth (COCO-style JSON)


@dataclass(frozen=True)
class ImageEntry:
    """Identity and size of one annotated image."""

    scene_id: int
    image_id: int
    width: int
    height: int


def write_ground_truth(
    gts: GroundTruthSet, images: Sequence[ImageEntry], path: str | os.PathLike
) -> None:
    payload = {
        "categories": [
            {"id": class_id, "name": gts.class_names.get(class_id, "")}
            for class_id in gts.class_ids
        ],
        "images": [
            {
                "scene_id": img.scene_id,
                "image_id": img.image_id,
                "width": img.width,
                "height": img.height,
            }
            for img in images
        ],
        "annotations": [
            {
                "scene_id": ann.scene_id,
                "image_id": ann.image_id,
                "category_id": ann.class_id,
                "bbox": ann.bbox.as_list(),
                "ignore": bool(ann.ignore),
            }
            for ann in gts.annotations
        ],
    }
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def read_ground_truth(path: str | os.PathLike) -> tuple[GroundTruthSet, list[ImageEntry]]:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaViolationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise SchemaViolationError(f"{path}: top level must be a JSON object")
    for section in ("categories", "images", "annotations"):
        if not isinstance(payload.get(section), list):
            raise SchemaViolationError(f"{path}: field {section!r} must be a list")

    class_ids: set[int] = set()
    class_names: dict[int, str] = {}
    for i, obj in enumerate(payload["categories"]):
        where = f"{path}: category {i}"
        if not isinstance(obj, dict):
            raise SchemaViolationError(f"{where}: expected a JSON object")
        class_id = _require_int(obj, "id", where, minimum=1)
        if class_id in class_ids:
            raise SchemaViolationError(f"{where}: duplicate category id {class_id}")
        class_ids.add(class_id)
        name = obj.get("name", "")
        if not isinstance(name, str):
            raise SchemaViolationError(f"{where}: field 'name' must be a string")
        if name:
            class_names[class_id] = name

    images = []
    sizes: dict[tuple[int, int], tuple[int, int]] = {}
    for i, obj in enumerate(payload["images"]):
        where = f"{path}: image {i}"
        if not isinstance(obj, dict):
            raise SchemaViolationError(f"{where}: expected a JSON object")
        entry = ImageEntry(
            scene_id=_require_int(obj, "scene_id", where),
            image_id=_require_int(obj, "image_id", where),
            width=_require_int(obj, "width", where, minimum=1),
            height=_require_int(obj, "height", where, minimum=1),
        )
        ident = (entry.scene_id, entry.image_id)
        if ident in sizes:
            raise SchemaViolationError(f"{where}: duplicate image {ident}")
        sizes[ident] = (entry.width, entry.height)
        images.append(entry)

    annotations = []
    for i, obj in enumerate(payload["annotations"]):
        where = f"{path}: annotation {i}"
        if not isinstance(obj, dict):
            raise SchemaViolationError(f"{where}: expected a JSON object")
        record = _parse_result_record(
            {**obj, "score": 0.0}, where
        )  # reuse bbox/id checks; score unused
        if record.category_id not in class_ids:
            raise SchemaViolationError(f"{where}: category {record.category_id} not in categories")
        ident = (record.scene_id, record.image_id)
        if ident not in sizes:
            raise SchemaViolationError(f"{where}: image {ident} not in images")
        width, height = sizes[ident]
        if not record.bbox.fits_within(width, height):
            raise SchemaViolationError(
                f"{where}: bbox {record.bbox.as_list()} exceeds image size {width}x{height}"
            )
        ignore = obj.get("ignore", False)
        if not isinstance(ignore, (bool, int)) or isinstance(ignore, float):
            raise SchemaViolationError(f"{where}: field 'ignore' must be boolean")
        annotations.append(
            GroundTruthAnnotation(
                scene_id=record.scene_id,
                image_id=record.image_id,
                class_id=record.category_id,
                bbox=record.bbox,
                ignore=bool(ignore),
            )
        )
    return GroundTruthSet(annotations, class_ids=class_ids, class_names=class_names), images


# ---------------------------------------------------------------------------
# AP report output


def write_ap_report(report: ApReport, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=1) + "\n")


def ap_report_csv(report: ApReport) -> str:
    """Flat CSV: one row per class AP, per threshold AP, and the mean."""
    lines = ["kind,key,ap"]
    for class_id in sorted(report.per_class_ap):
        lines.append(f"class,{class_id},{report.per_class_ap[class_id]!r}")
    for threshold in sorted(report.per_threshold_ap):
        lines.append(f"threshold,{threshold:.2f},{report.per_threshold_ap[threshold]!r}")
    lines.append(f"mean,,{report.mean_ap!r}")
    return "\n".join(lines) + "\n"


def format_ap_table(report: ApReport, class_names: dict[int, str] | None = None) -> str:
    """Human-readable AP summary for terminal output."""
    names = class_names or {}
    lines = ["class                            AP@[0.50:0.95]"]
    for class_id in sorted(report.per_class_ap):
        label = names.get(class_id, "")
        label = f"{class_id} {label}".strip()
        lines.append(f"{label:<32} {report.per_class_ap[class_id]:.4f}")
    lines.append("")
    lines.append("threshold  AP")
    for threshold in sorted(report.per_threshold_ap):
        lines.append(f"{threshold:<10.2f} {report.per_threshold_ap[threshold]:.4f}")
    lines.append("")
    lines.append(f"mean AP: {report.mean_ap:.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run configuration (TOML)


def load_config(path: str | os.PathLike) -> PipelineConfig:
    """Read a [pipeline] table; absent keys keep their defaults."""
    with open(path, "rb") as handle:
        try:
            payload = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise SchemaViolationError(f"{path}: invalid TOML: {exc}") from exc
    table = payload.get("pipeline", {})
    if not isinstance(table, dict):
        raise SchemaViolationError(f"{path}: [pipeline] must be a table")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(table) - known
    if unknown:
        raise SchemaViolationError(f"{path}: unknown pipeline keys {sorted(unknown)}")
    for key, value in table.items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaViolationError(f"{path}: pipeline.{key} must be a number, got {value!r}")
    extras = set(payload) - {"pipeline"}
    if extras:
        raise SchemaViolationError(f"{path}: unknown top-level tables {sorted(extras)}")
    try:
        return PipelineConfig(**{k: float(v) for k, v in table.items()})
    except ValueError as exc:
        raise SchemaViolationError(f"{path}: {exc}") from exc


def dump_config(cfg: PipelineConfig) -> str:
    lines = ["[pipeline]"]
    for f in fields(PipelineConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


def write_config(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    atomic_write_text(path, dump_config(cfg))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    """One schema problem: where it is, what kind, and what is wrong."""

    location: str
    category: str
    message: str

    def __str__(self) -> str:
        return f"{self.location}: [{self.category}] {self.message}"


_FORMAT_NAMES = ("store", "embeddings", "proposals", "results", "gt", "config")


def sniff_format(path: str | os.PathLike) -> str | None:
    """Best-effort format detection by magic bytes, extension, then JSON shape."""
    from .prototypes import STORE_MAGIC

    with open(path, "rb") as handle:
        head = handle.read(4096)
    if head[:4] == STORE_MAGIC:
        return "store"
    if head[:4] == ARCHIVE_MAGIC:
        return "embeddings"
    name = os.fspath(path)
    if name.endswith(".toml"):
        return "config"
    try:
        text = head.decode("utf-8")
    except UnicodeDecodeError:
        return None
    stripped = text.lstrip()
    if stripped.startswith("["):
        return "config" if stripped.startswith("[pipeline]") else "results"
    if stripped.startswith("{"):
        first_line = stripped.splitlines()[0] if stripped.splitlines() else ""
        try:
            obj = json.loads(first_line)
            if isinstance(obj, dict) and "rle" in obj:
                return "proposals"
        except json.JSONDecodeError:
            pass
        return "gt"
    return None


def _error_category(exc: FormatError) -> str:
    return {
        BadMagicError: "bad-magic",
        VersionMismatchError: "version-mismatch",
        CorruptError: "corrupt",
        MalformedRleError: "malformed-rle",
        SchemaViolationError: "schema",
    }.get(type(exc), "format")


def _validate_store(path: str) -> list[Violation]:
    from .prototypes import load_store

    try:
        load_store(path)
    except FormatError as exc:
        return [Violation(location=path, category=_error_category(exc), message=str(exc))]
    return []


def _validate_embeddings(path: str) -> list[Violation]:
    violations = []
    try:
        dtype_name, values = _read_archive_header(path)
    except FormatError as exc:
        return [Violation(location=path, category=_error_category(exc), message=str(exc))]
    try:
        meta = _read_archive_sidecar(path)
    except FormatError as exc:
        return [Violation(location=sidecar_path(path), category=_error_category(exc), message=str(exc))]
    meta_loc = sidecar_path(path)
    if meta["storage_dtype"] != dtype_name:
        violations.append(
            Violation(
                location=meta_loc,
                category="dtype-mismatch",
                message=f"sidecar declares {meta['storage_dtype']}, header says {dtype_name}",
            )
        )
    if len(meta["keys"]) != values.shape[0]:
        violations.append(
            Violation(
                location=meta_loc,
                category="key-count",
                message=f"{len(meta['keys'])} keys for {values.shape[0]} records",
            )
        )
    seen: set[ArchiveKey] = set()
    kinds: set[type] = set()
    for i, obj in enumerate(meta["keys"]):
        where = f"{meta_loc}: key {i}"
        try:
            key = _parse_archive_key(obj, where)
        except SchemaViolationError as exc:
            violations.append(Violation(location=where, category="schema", message=str(exc)))
            continue
        kinds.add(type(key))
        if key in seen:
            violations.append(Violation(location=where, category="duplicate-key", message=f"duplicates {key}"))
        seen.add(key)
    if len(kinds) > 1:
        violations.append(
            Violation(location=meta_loc, category="mixed-keys", message="support and proposal keys mixed")
        )
    if not np.isfinite(values).all():
        bad = int(np.argwhere(~np.isfinite(values).all(axis=1))[0][0])
        violations.append(
            Violation(location=f"{path}: record {bad}", category="non-finite", message="non-finite embedding value")
        )
    return violations


def _validate_proposals(path: str) -> list[Violation]:
    violations = []
    sizes: dict[tuple[int, int], tuple[int, int]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                violations.append(Violation(location=where, category="bad-json", message=exc.msg))
                continue
            try:
                record = _parse_proposal_line(obj, where)
            except SchemaViolationError as exc:
                violations.append(Violation(location=where, category="schema", message=str(exc)))
                continue
            ident = (record.scene_id, record.image_id)
            size = (record.width, record.height)
            if sizes.setdefault(ident, size) != size:
                violations.append(
                    Violation(
                        location=where,
                        category="size-conflict",
                        message=f"image {ident} was {sizes[ident]}, now {size}",
                    )
                )
    return violations


def _validate_results(path: str) -> list[Violation]:
    violations = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        return [Violation(location=f"{path}: line {exc.lineno}", category="bad-json", message=exc.msg)]
    if not isinstance(payload, list):
        return [Violation(location=path, category="schema", message="top level must be a JSON array")]
    records = []
    for i, obj in enumerate(payload):
        where = f"{path}: record {i}"
        try:
            records.append(_parse_result_record(obj, where))
        except SchemaViolationError as exc:
            violations.append(Violation(location=where, category="schema", message=str(exc)))
    order = [(r.scene_id, r.image_id, -r.score) for r in records]
    if order != sorted(order):
        first = next(i for i in range(1, len(order)) if order[i] < order[i - 1])
        violations.append(
            Violation(
                location=f"{path}: record {first}",
                category="not-sorted",
                message="records not sorted by (scene_id, image_id, score descending)",
            )
        )
    return violations


def _validate_gt(path: str) -> list[Violation]:
    try:
        read_ground_truth(path)
    except FormatError as exc:
        return [Violation(location=path, category=_error_category(exc), message=str(exc))]
    return []


def _validate_config(path: str) -> list[Violation]:
    try:
        load_config(path)
    except FormatError as exc:
        return [Violation(location=path, category=_error_category(exc), message=str(exc))]
    return []


def validate(path: str | os.PathLike, format_hint: str | None = None) -> list[Violation]:
    """Collect schema violations; empty list means the file is clean.

    Raises OSError for filesystem problems; format problems always come back
    as violations, never exceptions.
    """
    target = os.fspath(path)
    detected = format_hint or sniff_format(target)
    if detected is None:
        return [Violation(location=target, category="unknown-format", message="unrecognized file format")]
    if detected not in _FORMAT_NAMES:
        raise ValueError(f"format_hint must be one of {_FORMAT_NAMES}, got {detected!r}")
    checker = {
        "store": _validate_store,
        "embeddings": _validate_embeddings,
        "proposals": _validate_proposals,
        "results": _validate_results,
        "gt": _validate_gt,
        "config": _validate_config,
    }[detected]
    return checker(target)

"""Export pipeline: manifests in, engine archives out.

Three steps mirror the engine's data flow. ``prepare_supports`` embeds
masked support crops into a support-keyed embedding archive;
``generate_proposals`` runs a mask generator over scene images and writes
proposal records; ``embed_proposals`` re-runs the generator and embeds the
crops the engine's proposal filter retained, keyed by the exact retained
indices. Everything emitted is written through the engine's own format
layer, so its validator is the arbiter of correctness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from protodetect import (
    EmbeddingArchive,
    MaskProposal,
    ProposalKey,
    ProposalRecord,
    SupportKey,
    proposal_record,
    rle_encode,
)

from .backends import Embedder, MaskGenerator
from .preprocess import TARGET_EDGE, crop_policy, load_image, load_mask, object_crop


class ManifestError(ValueError):
    """A manifest file is structurally wrong: bad JSON shape, bad keys."""


class ConsistencyError(ValueError):
    """Inputs disagree with each other: unknown scenes, out-of-range indices."""


@dataclass(frozen=True)
class SupportEntry:
    class_id: int
    support_index: int
    image_path: Path
    mask_path: Path
    name: str | None = None


@dataclass(frozen=True)
class SceneEntry:
    scene_id: int
    image_id: int
    image_path: Path


def _require_fields(row: dict, fields: tuple[str, ...], where: str) -> None:
    missing = [f for f in fields if f not in row]
    if missing:
        raise ManifestError(f"{where}: missing field(s) {', '.join(missing)}")


def read_support_manifest(path) -> list[SupportEntry]:
    """JSON array of {class_id, image, mask, [support_index], [name]}.

    Paths are resolved relative to the manifest's directory. When
    support_index is omitted it counts up per class in file order.
    """
    base = Path(path).parent
    rows = _load_rows(path)
    entries: list[SupportEntry] = []
    counters: dict[int, int] = {}
    seen: set[tuple[int, int]] = set()
    for pos, row in enumerate(rows):
        where = f"{path}: entry {pos}"
        _require_fields(row, ("class_id", "image", "mask"), where)
        class_id = _as_int(row["class_id"], "class_id", where)
        if class_id < 1:
            raise ManifestError(f"{where}: class_id must be >= 1, got {class_id}")
        if "support_index" in row:
            index = _as_int(row["support_index"], "support_index", where)
        else:
            index = counters.get(class_id, 0)
        counters[class_id] = index + 1
        key = (class_id, index)
        if key in seen:
            raise ManifestError(f"{where}: duplicate support key class={class_id} index={index}")
        seen.add(key)
        entries.append(
            SupportEntry(
                class_id=class_id,
                support_index=index,
                image_path=base / row["image"],
                mask_path=base / row["mask"],
                name=row.get("name"),
            )
        )
    if not entries:
        raise ManifestError(f"{path}: manifest is empty")
    return entries


def read_scene_manifest(path) -> list[SceneEntry]:
    """JSON array of {scene_id, image_id, image}, paths relative to the manifest."""
    base = Path(path).parent
    rows = _load_rows(path)
    entries: list[SceneEntry] = []
    seen: set[tuple[int, int]] = set()
    for pos, row in enumerate(rows):
        where = f"{path}: entry {pos}"
        _require_fields(row, ("scene_id", "image_id", "image"), where)
        scene_id = _as_int(row["scene_id"], "scene_id", where)
        image_id = _as_int(row["image_id"], "image_id", where)
        key = (scene_id, image_id)
        if key in seen:
            raise ManifestError(f"{where}: duplicate image key scene={scene_id} image={image_id}")
        seen.add(key)
        entries.append(SceneEntry(scene_id=scene_id, image_id=image_id, image_path=base / row["image"]))
    if not entries:
        raise ManifestError(f"{path}: manifest is empty")
    return entries


def read_retained(path) -> dict[tuple[int, int], list[int]]:
    """The engine proposal filter's output: retained indices per image."""
    rows = _load_rows(path)
    out: dict[tuple[int, int], list[int]] = {}
    for pos, row in enumerate(rows):
        where = f"{path}: entry {pos}"
        _require_fields(row, ("scene_id", "image_id", "retained"), where)
        key = (_as_int(row["scene_id"], "scene_id", where), _as_int(row["image_id"], "image_id", where))
        indices = row["retained"]
        if not isinstance(indices, list) or any(not isinstance(i, int) or isinstance(i, bool) for i in indices):
            raise ManifestError(f"{where}: retained must be a list of integers")
        if key in out:
            raise ManifestError(f"{where}: duplicate image key scene={key[0]} image={key[1]}")
        out[key] = indices
    return out


def _load_rows(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, list) or any(not isinstance(row, dict) for row in data):
        raise ManifestError(f"{path}: expected a JSON array of objects")
    return data


def _as_int(value, field: str, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ManifestError(f"{where}: {field} must be an integer, got {value!r}")
    return value


def prepare_supports(
    entries: list[SupportEntry], embedder: Embedder, target: int = TARGET_EDGE
) -> EmbeddingArchive:
    """Embed one masked crop per support, keyed by (class_id, support_index)."""
    keys = []
    rows = np.empty((len(entries), embedder.dimension), dtype=np.float32)
    for pos, entry in enumerate(entries):
        image = load_image(entry.image_path)
        mask = load_mask(entry.mask_path)
        crop = object_crop(image, mask, target)
        vector = np.asarray(embedder.embed(crop), dtype=np.float32)
        if vector.shape != (embedder.dimension,):
            raise ConsistencyError(
                f"embedder '{embedder.spec}' returned shape {vector.shape}, "
                f"expected ({embedder.dimension},)"
            )
        keys.append(SupportKey(entry.class_id, entry.support_index))
        rows[pos] = vector
    return EmbeddingArchive(
        keys=keys,
        matrix=rows,
        extractor=embedder.spec,
        crop_policy=crop_policy(target),
        storage_dtype="f32",
    )


def generate_proposals(
    scenes: list[SceneEntry], generator: MaskGenerator
) -> list[ProposalRecord]:
    """One proposal record per generated mask, in manifest and discovery order."""
    records: list[ProposalRecord] = []
    for scene in scenes:
        image = load_image(scene.image_path)
        for generated in generator.generate(image):
            proposal = MaskProposal(
                mask=rle_encode(generated.mask),
                generator_iou=generated.predicted_iou,
                stability=generated.stability,
            )
            records.append(proposal_record(scene.scene_id, scene.image_id, proposal))
    return records


def embed_proposals(
    scenes: list[SceneEntry],
    retained: dict[tuple[int, int], list[int]],
    generator: MaskGenerator,
    embedder: Embedder,
    target: int = TARGET_EDGE,
) -> EmbeddingArchive:
    """Embed exactly the retained crops, keyed by (scene_id, image_id, index).

    The generator re-runs per image (it is deterministic), and the key set
    of the result equals the retained-index set: no extras, no gaps.
    """
    by_key = {(s.scene_id, s.image_id): s for s in scenes}
    for scene_id, image_id in retained:
        if (scene_id, image_id) not in by_key:
            raise ConsistencyError(
                f"retained file names scene {scene_id} image {image_id}, "
                "which the scene manifest does not contain"
            )
    keys = []
    vectors = []
    for scene in scenes:
        indices = retained.get((scene.scene_id, scene.image_id))
        if not indices:
            continue
        image = load_image(scene.image_path)
        masks = generator.generate(image)
        for index in indices:
            if not 0 <= index < len(masks):
                raise ConsistencyError(
                    f"retained index {index} out of range for scene {scene.scene_id} "
                    f"image {scene.image_id} with {len(masks)} proposals"
                )
            crop = object_crop(image, masks[index].mask, target)
            keys.append(ProposalKey(scene.scene_id, scene.image_id, index))
            vectors.append(np.asarray(embedder.embed(crop), dtype=np.float32))
    matrix = (
        np.stack(vectors) if vectors else np.empty((0, embedder.dimension), dtype=np.float32)
    )
    return EmbeddingArchive(
        keys=keys,
        matrix=matrix,
        extractor=f"{generator.spec}+{embedder.spec}",
        crop_policy=crop_policy(target),
        storage_dtype="f32",
    )

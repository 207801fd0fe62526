"""Shared fixtures: painted grayscale scenes with known objects.

Class identity is carried by aspect ratio (wide, tall, square), because
the grid-mean embedder sees shape, not intensity scale. All images are
clean two-level grayscale PNGs so the threshold generator recovers the
planted rectangles pixel-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

BG = 20
FG = 217

# class -> (w, h); the aspect ratio is the class signature
CLASS_SHAPES = {1: (96, 48), 2: (48, 96), 3: (72, 72)}

# (scene_id, image_id) -> [(class_id, x, y)], boxes never overlap
PLANTS = {
    (1, 0): [(1, 50, 40), (2, 300, 100), (3, 480, 300)],
    (1, 1): [(2, 80, 250), (1, 400, 60)],
    (2, 0): [(3, 60, 80), (1, 250, 320), (2, 500, 30)],
}

SCENE_SIZE = (640, 480)


def save_gray(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array.astype(np.uint8), mode="L").save(path)


def paint_object(canvas: np.ndarray, class_id: int, x: int, y: int) -> None:
    w, h = CLASS_SHAPES[class_id]
    canvas[y : y + h, x : x + w] = FG


def support_images(directory: Path, per_class: int = 2) -> list[dict]:
    """Write one image+mask PNG pair per support; return manifest rows."""
    rows = []
    for class_id in CLASS_SHAPES:
        w, h = CLASS_SHAPES[class_id]
        for idx in range(per_class):
            canvas = np.full((240, 320), BG, dtype=np.uint8)
            mask = np.zeros((240, 320), dtype=np.uint8)
            x, y = 100 + idx * 7, 80 + idx * 5
            canvas[y : y + h, x : x + w] = FG
            mask[y : y + h, x : x + w] = 255
            image_name = f"sup_{class_id}_{idx}.png"
            mask_name = f"supmask_{class_id}_{idx}.png"
            save_gray(canvas, directory / image_name)
            save_gray(mask, directory / mask_name)
            rows.append(
                {
                    "class_id": class_id,
                    "image": image_name,
                    "mask": mask_name,
                    "name": f"shape{class_id}",
                }
            )
    return rows


def scene_images(directory: Path) -> list[dict]:
    """Write the planted scene PNGs; return manifest rows."""
    width, height = SCENE_SIZE
    rows = []
    for (scene_id, image_id), objects in PLANTS.items():
        canvas = np.full((height, width), BG, dtype=np.uint8)
        for class_id, x, y in objects:
            paint_object(canvas, class_id, x, y)
        name = f"scene_{scene_id}_{image_id}.png"
        save_gray(canvas, directory / name)
        rows.append({"scene_id": scene_id, "image_id": image_id, "image": name})
    return rows


def write_gt(directory: Path) -> Path:
    from protodetect import (
        BoundingBox,
        GroundTruthAnnotation,
        GroundTruthSet,
        ImageEntry,
        write_ground_truth,
    )

    width, height = SCENE_SIZE
    annotations = []
    for (scene_id, image_id), objects in PLANTS.items():
        for class_id, x, y in objects:
            w, h = CLASS_SHAPES[class_id]
            annotations.append(
                GroundTruthAnnotation(scene_id, image_id, class_id, BoundingBox(x, y, w, h))
            )
    images = [
        ImageEntry(scene_id=s, image_id=i, width=width, height=height) for (s, i) in PLANTS
    ]
    path = directory / "gt.json"
    write_ground_truth(GroundTruthSet(annotations, class_ids=sorted(CLASS_SHAPES)), images, path)
    return path


@pytest.fixture(scope="session")
def workspace(tmp_path_factory) -> dict[str, Path]:
    """Images, manifests, and ground truth for the full pipeline. Read-only."""
    directory = tmp_path_factory.mktemp("workspace")
    support_rows = support_images(directory)
    scene_rows = scene_images(directory)
    supports_manifest = directory / "supports.json"
    scenes_manifest = directory / "scenes.json"
    supports_manifest.write_text(json.dumps(support_rows, indent=1))
    scenes_manifest.write_text(json.dumps(scene_rows, indent=1))
    return {
        "dir": directory,
        "supports_manifest": supports_manifest,
        "scenes_manifest": scenes_manifest,
        "gt": write_gt(directory),
    }

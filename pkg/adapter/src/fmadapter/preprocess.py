"""Crop preparation for the embedding extractor.

Every crop lands on a fixed square canvas the same way: cut the image
along the mask's bounding box, zero every pixel the mask excludes, scale
the cut so its longer side matches the canvas edge, and pad the remainder
with zeros on the right and bottom. Supports and proposal crops share the
policy so their embeddings live in the same distribution.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from protodetect import mask_to_bbox, rle_encode

TARGET_EDGE = 224


def crop_policy(target: int = TARGET_EDGE) -> str:
    """Sidecar tag describing exactly what the extractor saw."""
    return f"bbox-crop; background-zeroed; longer-edge-{target}; pad-right-bottom"


def load_image(path) -> np.ndarray:
    """Read an image file as float32 in [0, 1], grayscale (H, W) or RGB (H, W, 3)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    """Read a mask image as a boolean (H, W) array; any nonzero pixel is foreground."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 0


def zero_background(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy of ``image`` with every pixel outside ``mask`` set to 0."""
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[~np.asarray(mask, dtype=bool)] = 0.0
    return out


def resize_longer_edge(image: np.ndarray, target: int = TARGET_EDGE) -> np.ndarray:
    """Scale so the longer side becomes ``target``, keeping aspect ratio.

    Bilinear resampling; the shorter side rounds to the nearest pixel but
    never below 1.
    """
    height, width = image.shape[:2]
    if height <= 0 or width <= 0:
        raise ValueError(f"cannot resize empty image of shape {image.shape}")
    if width >= height:
        new_w = target
        new_h = max(1, round(height * target / width))
    else:
        new_h = target
        new_w = max(1, round(width * target / height))
    # PIL wants uint8 or single-band float; go through float32 mode "F" per band
    if image.ndim == 2:
        resized = Image.fromarray(image.astype(np.float32), mode="F").resize(
            (new_w, new_h), Image.BILINEAR
        )
        return np.asarray(resized, dtype=np.float32)
    bands = [
        np.asarray(
            Image.fromarray(image[:, :, c].astype(np.float32), mode="F").resize(
                (new_w, new_h), Image.BILINEAR
            ),
            dtype=np.float32,
        )
        for c in range(image.shape[2])
    ]
    return np.stack(bands, axis=-1)


def pad_to_square(image: np.ndarray, target: int = TARGET_EDGE) -> np.ndarray:
    """Zero-pad on the right and bottom up to ``target`` x ``target``."""
    height, width = image.shape[:2]
    if height > target or width > target:
        raise ValueError(f"image {width}x{height} exceeds target {target}")
    pad = [(0, target - height), (0, target - width)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="constant", constant_values=0.0)


def object_crop(image: np.ndarray, mask: np.ndarray, target: int = TARGET_EDGE) -> np.ndarray:
    """Full crop policy: bbox cut, background zeroed, resized, padded square.

    Returns a float32 array of shape (target, target) or (target, target, C).
    Raises the engine's empty-mask error when the mask has no foreground.
    """
    mask = np.asarray(mask, dtype=bool)
    box = mask_to_bbox(rle_encode(mask))
    cut = image[box.y : box.y + box.h, box.x : box.x + box.w]
    cut_mask = mask[box.y : box.y + box.h, box.x : box.x + box.w]
    cut = zero_background(cut, cut_mask)
    return pad_to_square(resize_longer_edge(cut, target), target)

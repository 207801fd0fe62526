"""Mask-generation and embedding backends.

Two families. The classical stand-ins (thresholding, grid statistics,
fixed-seed projections) are self-contained, deterministic, and run in any
environment; they exist so the export pipeline is testable offline. The
model-backed wrappers activate only when their runtimes are installed and
otherwise fail at construction with the packages they need.

Backends are selected by spec string: ``otsu``, ``threshold:0.6``,
``grid:8``, ``proj:64``, ``sam:vit_h``, ``dino:dinov2_vits14``. That
string is recorded verbatim in every archive sidecar the exporter writes.
"""

from __future__ import annotations

import importlib.util
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import ndimage


class BackendUnavailableError(RuntimeError):
    """A model-backed backend was requested but its runtime is not installed."""


@dataclass(frozen=True)
class GeneratedMask:
    """One mask from a generator, with the generator's own quality estimates."""

    mask: np.ndarray
    predicted_iou: float
    stability: float

    def __post_init__(self) -> None:
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {self.mask.shape}")
        for label, value in (("predicted_iou", self.predicted_iou), ("stability", self.stability)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{label} must be in [0, 1], got {value}")


@runtime_checkable
class MaskGenerator(Protocol):
    spec: str

    def generate(self, image: np.ndarray) -> list[GeneratedMask]: ...


@runtime_checkable
class Embedder(Protocol):
    spec: str
    dimension: int

    def embed(self, crop: np.ndarray) -> np.ndarray: ...


def _to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.asarray(image, dtype=np.float64)
    return np.asarray(image, dtype=np.float64).mean(axis=2)


def otsu_threshold(gray: np.ndarray, bins: int = 256) -> float:
    """Histogram split maximizing between-class variance, on values in [0, 1].

    The between-class variance is exactly flat across the empty valley of
    a clean bimodal histogram, so the middle of the flat-maximum plateau
    is used, and the returned cut is the right edge of that bin: every
    value inside the split bin counts as background under ``gray > t``.
    """
    hist, edges = np.histogram(gray.ravel(), bins=bins, range=(0.0, 1.0))
    total = hist.sum()
    if total == 0:
        return 0.5
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight_bg = np.cumsum(hist)
    weight_fg = total - weight_bg
    cum_mass = np.cumsum(hist * centers)
    mean_bg = np.divide(cum_mass, weight_bg, out=np.zeros(bins), where=weight_bg > 0)
    mean_fg = np.divide(
        cum_mass[-1] - cum_mass, weight_fg, out=np.zeros(bins), where=weight_fg > 0
    )
    variance = weight_bg * weight_fg * (mean_bg - mean_fg) ** 2
    plateau = np.flatnonzero(variance == variance.max())
    return float(edges[int(plateau[plateau.size // 2]) + 1])


class ThresholdRegions:
    """Connected bright regions above a global threshold.

    A classical stand-in for a learned mask generator. ``predicted_iou`` is
    the region's fill ratio inside its own bounding box (how box-like it
    is); ``stability`` is the IoU, within that box, between the masks
    binarized at threshold +/- ``stability_delta`` (how little the region
    changes when the cut moves). Both land in [0, 1] by construction.
    Regions come out in row-major discovery order, so proposal indices are
    reproducible.

    Bright structures are assumed to be the minority of the frame: when
    the cut marks more than half the pixels as foreground (flat images,
    inverted contrast), the image is treated as structureless and yields
    no proposals.
    """

    def __init__(
        self,
        threshold: float | None = None,
        stability_delta: float = 0.05,
        min_pixels: int = 16,
    ) -> None:
        if threshold is not None and not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {threshold}")
        if min_pixels < 1:
            raise ValueError(f"min_pixels must be >= 1, got {min_pixels}")
        self.threshold = threshold
        self.stability_delta = stability_delta
        self.min_pixels = min_pixels
        name = "otsu" if threshold is None else f"threshold:{threshold:g}"
        self.spec = f"{name};delta={stability_delta:g};min_px={min_pixels}"

    def generate(self, image: np.ndarray) -> list[GeneratedMask]:
        gray = _to_gray(image)
        cut = self.threshold if self.threshold is not None else otsu_threshold(gray)
        foreground = gray > cut
        if not foreground.any() or foreground.mean() > 0.5:
            return []
        labels, count = ndimage.label(foreground)
        high = gray > cut + self.stability_delta
        low = gray > cut - self.stability_delta
        out: list[GeneratedMask] = []
        for slc, index in zip(ndimage.find_objects(labels), range(1, count + 1)):
            region = labels[slc] == index
            area = int(region.sum())
            if area < self.min_pixels:
                continue
            box_area = region.shape[0] * region.shape[1]
            fill = area / box_area
            union = int(low[slc].sum())
            inter = int(high[slc].sum())
            stability = inter / union if union else 0.0
            dense = np.zeros(gray.shape, dtype=bool)
            dense[slc] = region
            out.append(
                GeneratedMask(
                    mask=dense,
                    predicted_iou=min(1.0, fill),
                    stability=min(1.0, stability),
                )
            )
        return out


class GridMeanEmbedder:
    """Mean intensity over a grid of cells, flattened.

    Crops arrive already on the square canvas, so the cells tile it
    exactly when ``grid`` divides the edge; trailing remainders fold into
    the last cell. Color is collapsed to grayscale first so the dimension
    does not depend on channel count.
    """

    def __init__(self, grid: int = 8) -> None:
        if grid < 1:
            raise ValueError(f"grid must be >= 1, got {grid}")
        self.grid = grid
        self.dimension = grid * grid
        self.spec = f"grid:{grid}"

    def embed(self, crop: np.ndarray) -> np.ndarray:
        gray = _to_gray(crop)
        height, width = gray.shape
        rows = np.linspace(0, height, self.grid + 1).astype(int)
        cols = np.linspace(0, width, self.grid + 1).astype(int)
        cells = [
            gray[rows[r] : rows[r + 1], cols[c] : cols[c + 1]].mean()
            if rows[r + 1] > rows[r] and cols[c + 1] > cols[c]
            else 0.0
            for r in range(self.grid)
            for c in range(self.grid)
        ]
        return np.asarray(cells, dtype=np.float32)


class ProjectionEmbedder:
    """Grid means pushed through a fixed-seed Gaussian projection.

    The projection matrix depends only on (grid, dimension, seed), so two
    instances with the same parameters embed identically in any process.
    """

    def __init__(self, dimension: int = 64, grid: int = 16, seed: int = 7) -> None:
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        self._inner = GridMeanEmbedder(grid)
        self.dimension = dimension
        rng = np.random.default_rng(seed)
        self._matrix = rng.standard_normal((self._inner.dimension, dimension)).astype(
            np.float32
        ) / np.sqrt(dimension)
        self.spec = f"proj:{dimension};grid={grid};seed={seed}"

    def embed(self, crop: np.ndarray) -> np.ndarray:
        return (self._inner.embed(crop) @ self._matrix).astype(np.float32)


def _require(module: str, package: str, extra: str) -> None:
    if importlib.util.find_spec(module) is None:
        raise BackendUnavailableError(
            f"{extra} backends need the '{package}' package; install it with "
            f"'pip install {package}' (plus a compatible torch build)"
        )


class SamMaskGenerator:
    """Automatic mask generation via a promptable segmentation model.

    Requires the ``segment_anything`` and ``torch`` runtimes; construction
    fails with an actionable message when they are absent.
    """

    def __init__(self, model_id: str = "vit_h", checkpoint: str | None = None) -> None:
        _require("torch", "torch", "sam:")
        _require("segment_anything", "segment-anything", "sam:")
        from segment_anything import SamAutomaticMaskGenerator, sam_model_registry

        model = sam_model_registry[model_id](checkpoint=checkpoint)
        model.eval()
        self._generator = SamAutomaticMaskGenerator(model, points_per_side=16)
        self.spec = f"sam:{model_id}"

    def generate(self, image: np.ndarray) -> list[GeneratedMask]:
        as_uint8 = (np.clip(_to_gray(image), 0.0, 1.0) * 255).astype(np.uint8)
        rgb = np.stack([as_uint8] * 3, axis=-1) if image.ndim == 2 else image
        return [
            GeneratedMask(
                mask=np.asarray(raw["segmentation"], dtype=bool),
                predicted_iou=float(np.clip(raw["predicted_iou"], 0.0, 1.0)),
                stability=float(np.clip(raw["stability_score"], 0.0, 1.0)),
            )
            for raw in self._generator.generate(rgb)
        ]


class DinoEmbedder:
    """Class-token embeddings from a self-supervised vision transformer.

    Requires ``torch``; the model comes from torch.hub in eval mode, so
    repeated runs embed identically.
    """

    def __init__(self, model_id: str = "dinov2_vits14") -> None:
        _require("torch", "torch", "dino:")
        import torch

        self._torch = torch
        self._model = torch.hub.load("facebookresearch/dinov2", model_id)
        self._model.eval()
        self.dimension = int(self._model.embed_dim)
        self.spec = f"dino:{model_id}"

    def embed(self, crop: np.ndarray) -> np.ndarray:
        torch = self._torch
        gray = np.asarray(crop, dtype=np.float32)
        rgb = np.stack([gray] * 3, axis=-1) if gray.ndim == 2 else gray
        tensor = torch.from_numpy(rgb).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            features = self._model(tensor)
        return features.squeeze(0).numpy().astype(np.float32)


def make_mask_generator(spec: str) -> MaskGenerator:
    """Build a mask generator from its spec string."""
    name, _, arg = spec.partition(":")
    if name == "otsu" and not arg:
        return ThresholdRegions()
    if name == "threshold":
        return ThresholdRegions(threshold=float(arg))
    if name == "sam":
        return SamMaskGenerator(model_id=arg or "vit_h")
    raise ValueError(f"unknown mask generator spec '{spec}'")


def make_embedder(spec: str) -> Embedder:
    """Build an embedder from its spec string."""
    name, _, arg = spec.partition(":")
    if name == "grid":
        return GridMeanEmbedder(grid=int(arg) if arg else 8)
    if name == "proj":
        return ProjectionEmbedder(dimension=int(arg) if arg else 64)
    if name == "dino":
        return DinoEmbedder(model_id=arg or "dinov2_vits14")
    raise ValueError(f"unknown embedder spec '{spec}'")

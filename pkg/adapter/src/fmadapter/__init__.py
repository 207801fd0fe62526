"""Foundation-model adapter for the prototype-matching detection engine.

Turns images into the engine's input files: support embeddings from
masked crops, mask proposals from a generator backend, and embeddings for
the proposals the engine's filter retained. Model-backed backends are
optional; deterministic classical stand-ins keep the pipeline runnable
anywhere.
"""

__version__ = "0.1.0"

from .backends import (
    BackendUnavailableError,
    DinoEmbedder,
    Embedder,
    GeneratedMask,
    GridMeanEmbedder,
    MaskGenerator,
    ProjectionEmbedder,
    SamMaskGenerator,
    ThresholdRegions,
    make_embedder,
    make_mask_generator,
    otsu_threshold,
)
from .export import (
    ConsistencyError,
    ManifestError,
    SceneEntry,
    SupportEntry,
    embed_proposals,
    generate_proposals,
    prepare_supports,
    read_retained,
    read_scene_manifest,
    read_support_manifest,
)
from .preprocess import (
    TARGET_EDGE,
    crop_policy,
    load_image,
    load_mask,
    object_crop,
    pad_to_square,
    resize_longer_edge,
    zero_background,
)

__all__ = [
    "BackendUnavailableError",
    "ConsistencyError",
    "DinoEmbedder",
    "Embedder",
    "GeneratedMask",
    "GridMeanEmbedder",
    "ManifestError",
    "MaskGenerator",
    "ProjectionEmbedder",
    "SamMaskGenerator",
    "SceneEntry",
    "SupportEntry",
    "TARGET_EDGE",
    "ThresholdRegions",
    "crop_policy",
    "embed_proposals",
    "generate_proposals",
    "load_image",
    "load_mask",
    "make_embedder",
    "make_mask_generator",
    "object_crop",
    "otsu_threshold",
    "pad_to_square",
    "prepare_supports",
    "read_retained",
    "read_scene_manifest",
    "read_support_manifest",
    "resize_longer_edge",
    "zero_background",
]

"""Similarity scoring: L2 normalization, cosine rows, stable softmax, composite confidences.

All arithmetic runs at 64-bit precision regardless of how embeddings were
stored on disk. Prototypes enter the cosine product exactly as stored, i.e.
they are not renormalized here; their norms are at most 1 by construction,
which bounds every cosine score to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DimensionMismatchError, ZeroVectorError

if TYPE_CHECKING:
    from .prototypes import Prototype

NORM_EPS = 1e-12


def _as_float_vector(values: np.ndarray | Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite components")
    return arr


def l2_normalize(vector: np.ndarray | Sequence[float], eps: float = NORM_EPS) -> np.ndarray:
    """Return vector / ||vector||; rejects vectors with norm at most ``eps``."""
    arr = _as_float_vector(vector, "vector")
    norm = float(np.linalg.norm(arr))
    if norm <= eps:
        raise ZeroVectorError(f"vector norm {norm!r} is at or below the {eps!r} floor")
    return arr / norm


@dataclass(frozen=True)
class SimilarityRow:
    """Per-proposal similarity scores against the full ordered class set."""

    class_ids: tuple[int, ...]
    scores: np.ndarray

    def __post_init__(self) -> None:
        ids = tuple(int(c) for c in self.class_ids)
        object.__setattr__(self, "class_ids", ids)
        scores = _as_float_vector(self.scores, "scores").copy()
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        if len(ids) != scores.size:
            raise ValueError(f"{len(ids)} class ids but {scores.size} scores")
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be distinct")

    @property
    def s_max(self) -> float:
        return float(self.scores.max())

    @property
    def predicted_class(self) -> int:
        """Class at the score argmax; ties resolve to the lowest class id."""
        best = self.scores.max()
        return min(c for c, s in zip(self.class_ids, self.scores) if s == best)


def score_against(z: np.ndarray, class_ids: tuple[int, ...], matrix: np.ndarray) -> SimilarityRow:
    """Dot a normalized embedding against a stacked (N, d) prototype matrix."""
    if matrix.ndim != 2:
        raise ValueError(f"prototype matrix must be 2D, got shape {matrix.shape}")
    if matrix.shape[0] == 0:
        raise ValueError("at least one prototype is required")
    if z.shape[0] != matrix.shape[1]:
        raise DimensionMismatchError(
            f"embedding has dimension {z.shape[0]} but prototypes have {matrix.shape[1]}"
        )
    return SimilarityRow(class_ids=class_ids, scores=matrix @ z)


def cosine_scores(z: np.ndarray, prototypes: Sequence["Prototype"]) -> SimilarityRow:
    """Similarity of a normalized embedding to each prototype, as stored."""
    if len(prototypes) == 0:
        raise ValueError("at least one prototype is required")
    class_ids = tuple(p.class_id for p in prototypes)
    matrix = np.stack([p.vector for p in prototypes])
    return score_against(_as_float_vector(z, "embedding"), class_ids, matrix)


def softmax_max(scores: np.ndarray | Sequence[float]) -> float:
    """Softmax probability of the top score, computed via max subtraction.

    Shift-invariant: adding a constant to every score leaves the result
    unchanged. Always in (0, 1]; equals 1/N for N equal scores.
    """
    arr = _as_float_vector(scores, "scores")
    shifted = arr - arr.max()
    return float(1.0 / np.exp(shifted).sum())


def filter_score(s_max: float, p_max: float) -> float:
    """Gating score: top similarity plus its softmax probability."""
    if not 0.0 < p_max <= 1.0:
        raise ValueError(f"p_max must be in (0, 1], got {p_max}")
    return s_max + p_max


def mean_corrected(row: SimilarityRow) -> float:
    """Top similarity minus the mean similarity across all classes.

    Evaluated as mean(s_max - s_i) so the result is non-negative by
    construction and exactly zero when all scores are equal.
    """
    gaps = row.s_max - row.scores
    return float(gaps.sum() / row.scores.size)


def final_score(s_max: float, p_max: float, s_mc: float) -> float:
    """Ranking confidence: filter score plus the mean-corrected similarity."""
    if s_mc < 0.0:
        raise ValueError(f"mean-corrected similarity must be non-negative, got {s_mc}")
    return filter_score(s_max, p_max) + s_mc

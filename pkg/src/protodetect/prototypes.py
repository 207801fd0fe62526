"""Class prototypes: construction from support embeddings, persistence, diagnostics.

A prototype is the plain mean of a class's L2-normalized support embeddings,
so its norm never exceeds 1 and equals 1 only when all normalized supports
coincide. Stores keep prototypes in ascending class-id order and are
append-only: onboarding a new class never touches existing vectors.

Store file layout (version 1, all integers little-endian):

    magic      4 bytes  b"DPMP"
    version    u16
    dimension  u32
    count      u32
    provenance u16 length + UTF-8 bytes
    records    count times, ascending class id:
        class_id   u32
        k_support  u16
        name       u16 length + UTF-8 bytes (length 0 = unnamed)
        vector     dimension x f64
    checksum   u32  CRC32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    BadMagicError,
    CorruptError,
    DimensionMismatchError,
    DuplicateClassError,
    VersionMismatchError,
    ZeroVectorError,
)
from .ioutil import atomic_write_bytes
from .scoring import l2_normalize

STORE_MAGIC = b"DPMP"
STORE_VERSION = 1


def _read_only(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SupportSet:
    """The labeled example embeddings for one class."""

    class_id: int
    embeddings: tuple[np.ndarray, ...]
    name: str | None = None

    def __post_init__(self) -> None:
        if int(self.class_id) < 1:
            raise ValueError(f"class id must be a positive integer, got {self.class_id}")
        object.__setattr__(self, "class_id", int(self.class_id))
        if len(self.embeddings) < 1:
            raise ValueError(f"class {self.class_id} has no support embeddings")
        vectors = tuple(_read_only(e) for e in self.embeddings)
        dims = {v.shape for v in vectors}
        if len(dims) != 1 or vectors[0].ndim != 1:
            raise DimensionMismatchError(
                f"class {self.class_id} support embeddings disagree on shape: {sorted(dims)}"
            )
        object.__setattr__(self, "embeddings", vectors)

    @property
    def k(self) -> int:
        return len(self.embeddings)

    @property
    def dimension(self) -> int:
        return self.embeddings[0].shape[0]


@dataclass(frozen=True)
class Prototype:
    """Mean of a class's normalized support embeddings."""

    class_id: int
    vector: np.ndarray
    k_support: int
    name: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "vector", _read_only(self.vector))
        if self.vector.ndim != 1 or self.vector.size == 0:
            raise ValueError(f"prototype vector must be a non-empty 1D array, got shape {self.vector.shape}")
        if self.k_support < 1:
            raise ValueError(f"k_support must be >= 1, got {self.k_support}")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def build_prototype(support: SupportSet) -> Prototype:
    """Average the normalized support embeddings of one class."""
    acc = np.zeros(support.dimension, dtype=np.float64)
    for index, embedding in enumerate(support.embeddings):
        try:
            acc += l2_normalize(embedding)
        except ZeroVectorError as exc:
            raise ZeroVectorError(
                f"support {index} of class {support.class_id}: {exc}"
            ) from exc
    return Prototype(
        class_id=support.class_id,
        vector=acc / support.k,
        k_support=support.k,
        name=support.name,
    )


class PrototypeStore:
    """Prototypes of all onboarded classes, ordered by ascending class id."""

    def __init__(self, dimension: int, provenance: str = "") -> None:
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        self._dimension = int(dimension)
        self._provenance = provenance
        self._prototypes: dict[int, Prototype] = {}
        self._matrix: np.ndarray | None = None

    @property
    def dimension(self) -> int:
        return self._dimension

    @property
    def provenance(self) -> str:
        return self._provenance

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self._prototypes))

    @property
    def prototypes(self) -> tuple[Prototype, ...]:
        return tuple(self._prototypes[c] for c in self.class_ids)

    @property
    def matrix(self) -> np.ndarray:
        """Stacked (N, d) prototype matrix in ascending class-id order."""
        if self._matrix is None:
            self._matrix = np.stack([p.vector for p in self.prototypes])
            self._matrix.setflags(write=False)
        return self._matrix

    def __len__(self) -> int:
        return len(self._prototypes)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._prototypes

    def __getitem__(self, class_id: int) -> Prototype:
        return self._prototypes[class_id]

    def __iter__(self) -> Iterator[Prototype]:
        return iter(self.prototypes)

    def add(self, prototype: Prototype) -> None:
        """Onboard one class; existing prototypes are never modified."""
        if prototype.class_id in self._prototypes:
            raise DuplicateClassError(f"class {prototype.class_id} is already in the store")
        if prototype.vector.shape[0] != self._dimension:
            raise DimensionMismatchError(
                f"class {prototype.class_id} has dimension {prototype.vector.shape[0]}, "
                f"store expects {self._dimension}"
            )
        self._prototypes[prototype.class_id] = prototype
        self._matrix = None

    def add_support_set(self, support: SupportSet) -> Prototype:
        prototype = build_prototype(support)
        self.add(prototype)
        return prototype


def build_store(supports: Iterable[SupportSet], provenance: str = "") -> PrototypeStore:
    """Build one prototype per class; class ids must be distinct."""
    supports = list(supports)
    if not supports:
        raise ValueError("at least one support set is required")
    store = PrototypeStore(dimension=supports[0].dimension, provenance=provenance)
    for support in supports:
        store.add_support_set(support)
    return store


def prototype_similarity_matrix(store: PrototypeStore) -> np.ndarray:
    """Pairwise cosine between prototypes (normalized for this diagnostic).

    The matching path dots embeddings against prototypes as stored; this
    normalizes both sides because the diagnostic is angle-based. Symmetric
    with unit diagonal.
    """
    unit = np.stack([l2_normalize(p.vector) for p in store.prototypes])
    return unit @ unit.T


def _pack_string(text: str) -> bytes:
    data = text.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError(f"string too long to persist ({len(data)} bytes)")
    return struct.pack("<H", len(data)) + data


class _Cursor:
    """Sequential reader over a byte buffer; raises CorruptError on underrun."""

    def __init__(self, data: bytes, label: str) -> None:
        self.data = data
        self.offset = 0
        self.label = label

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise CorruptError(f"{self.label}: truncated at byte {self.offset}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_string(self) -> str:
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf-8")


def save_store(store: PrototypeStore, path: str | os.PathLike) -> None:
    """Write a store with trailing CRC32; the write is atomic (temp + rename)."""
    chunks = [STORE_MAGIC, struct.pack("<HII", STORE_VERSION, store.dimension, len(store))]
    chunks.append(_pack_string(store.provenance))
    for prototype in store.prototypes:
        if prototype.k_support > 0xFFFF:
            raise ValueError(f"k_support {prototype.k_support} does not fit in u16")
        chunks.append(struct.pack("<IH", prototype.class_id, prototype.k_support))
        chunks.append(_pack_string(prototype.name or ""))
        chunks.append(prototype.vector.astype("<f8").tobytes())
    body = b"".join(chunks)
    payload = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    atomic_write_bytes(path, payload)


def load_store(path: str | os.PathLike) -> PrototypeStore:
    """Read a store written by :func:`save_store`; bit-exact roundtrip."""
    with open(path, "rb") as handle:
        data = handle.read()
    if len(data) < len(STORE_MAGIC):
        raise CorruptError(f"{path}: file shorter than the magic header")
    if data[: len(STORE_MAGIC)] != STORE_MAGIC:
        raise BadMagicError(f"{path}: expected magic {STORE_MAGIC!r}, found {data[:4]!r}")
    if len(data) < len(STORE_MAGIC) + 2 + 4:
        raise CorruptError(f"{path}: truncated header")
    body, stored_crc_bytes = data[:-4], data[-4:]
    cursor = _Cursor(body, str(path))
    cursor.take(len(STORE_MAGIC))
    (version,) = cursor.unpack("<H")
    if version != STORE_VERSION:
        raise VersionMismatchError(f"{path}: store version {version}, reader supports {STORE_VERSION}")
    (stored_crc,) = struct.unpack("<I", stored_crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CorruptError(f"{path}: checksum mismatch")
    dimension, count = cursor.unpack("<II")
    provenance = cursor.take_string()
    store = PrototypeStore(dimension=dimension, provenance=provenance)
    previous_id = 0
    for _ in range(count):
        class_id, k_support = cursor.unpack("<IH")
        if class_id <= previous_id:
            raise CorruptError(f"{path}: class ids not strictly ascending at {class_id}")
        previous_id = class_id
        name = cursor.take_string()
        vector = np.frombuffer(cursor.take(dimension * 8), dtype="<f8")
        store.add(Prototype(class_id=class_id, vector=vector, k_support=k_support, name=name or None))
    if cursor.offset != len(body):
        raise CorruptError(f"{path}: {len(body) - cursor.offset} unexpected trailing bytes")
    return store


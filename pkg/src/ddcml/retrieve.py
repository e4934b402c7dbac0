"""Embedding index for content-based retrieval.

Stores (case_id, label, embedding) entries and answers k-nearest-neighbor
queries by exact linear scan under Euclidean distance, with ties broken
by case_id in lexicographic order.  Indexes serialize to a little-endian
"DDIX" binary format that round-trips bit-exact.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .cae import Model
from .errors import DataError, UsageError
from .volio import CaseRecord, read_volume

DDIX_MAGIC = b"DDIX"
# magic, embedding length, entry count
DDIX_HEADER = struct.Struct("<4sII")
_ID_LEN = struct.Struct("<H")
_LABEL = struct.Struct("<i")


class IndexFormatError(DataError):
    """Malformed or truncated DDIX index file."""


@dataclass(frozen=True)
class EmbeddingIndex:
    """Immutable set of labeled embeddings with a fixed dimension."""

    case_ids: tuple[str, ...]
    labels: tuple[int, ...]
    vectors: np.ndarray
    dimension: int

    def __post_init__(self):
        n = len(self.case_ids)
        if len(self.labels) != n:
            raise UsageError(f"{n} ids but {len(self.labels)} labels")
        if self.vectors.shape != (n, self.dimension):
            raise UsageError(
                f"vectors shape {self.vectors.shape}, expected ({n}, {self.dimension})"
            )
        if len(set(self.case_ids)) != n:
            raise DataError("duplicate case_ids in index")
        if n and not np.isfinite(self.vectors).all():
            raise DataError("non-finite embedding in index")

    def __len__(self) -> int:
        return len(self.case_ids)

    @property
    def entries(self):
        return list(zip(self.case_ids, self.labels, self.vectors))

    def label_of(self, case_id: str) -> int:
        try:
            return self.labels[self.case_ids.index(case_id)]
        except ValueError:
            raise UsageError(f"unknown case_id {case_id!r}") from None


def index_from_entries(
    case_ids, labels, vectors: np.ndarray, dimension: int | None = None
) -> EmbeddingIndex:
    """Assemble an index from parallel id/label/embedding sequences."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        if vectors.size == 0 and dimension is not None:
            vectors = vectors.reshape(0, dimension)
        else:
            raise UsageError(f"vectors must be 2-D, got shape {vectors.shape}")
    if dimension is None:
        dimension = vectors.shape[1]
    return EmbeddingIndex(tuple(case_ids), tuple(labels), vectors, dimension)


def build_index(cases: list[CaseRecord], model: Model) -> EmbeddingIndex:
    """Encode each case's volume with the model; one entry per case."""
    dz = model.spec.embedding_dim
    ids, labels, vecs = [], [], []
    for rec in cases:
        ids.append(rec.subject_id)
        labels.append(rec.class_label)
        vecs.append(model.encode(read_volume(rec.volume_path)))
    vectors = np.stack(vecs) if vecs else np.zeros((0, dz))
    return EmbeddingIndex(tuple(ids), tuple(labels), vectors, dz)


def query(index: EmbeddingIndex, z: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-min(k, N) entries by Euclidean distance to z, ascending.

    Exact linear scan; equal distances order by case_id lexicographically.
    """
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (index.dimension,):
        raise UsageError(
            f"query shape {z.shape}, index dimension {index.dimension}"
        )
    if not np.isfinite(z).all():
        raise DataError("non-finite query embedding")
    if len(index) == 0:
        return []
    dists = np.sqrt(((index.vectors - z) ** 2).sum(axis=1))
    order = sorted(range(len(index)), key=lambda i: (dists[i], index.case_ids[i]))
    return [(index.case_ids[i], float(dists[i])) for i in order[:k]]


def majority_label(index: EmbeddingIndex, neighbors) -> int | None:
    """Most common label among query results; None on a tied vote."""
    if not neighbors:
        raise UsageError("no neighbors to vote on")
    counts = Counter(index.label_of(cid) for cid, _ in neighbors)
    ranked = counts.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0]


def save_index(index: EmbeddingIndex, path) -> None:
    """Write the DDIX binary form (little-endian, float64 embeddings)."""
    with open(path, "wb") as fh:
        fh.write(DDIX_HEADER.pack(DDIX_MAGIC, index.dimension, len(index)))
        for cid, label, vec in index.entries:
            raw = cid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise UsageError(f"case_id too long: {len(raw)} bytes")
            fh.write(_ID_LEN.pack(len(raw)))
            fh.write(raw)
            fh.write(_LABEL.pack(label))
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def load_index(path) -> EmbeddingIndex:
    """Read a DDIX file; raises IndexFormatError on any malformation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < DDIX_HEADER.size:
        raise IndexFormatError(f"file shorter than header: {len(blob)} bytes")
    magic, dim, count = DDIX_HEADER.unpack_from(blob, 0)
    if magic != DDIX_MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}")
    off = DDIX_HEADER.size
    ids, labels, vecs = [], [], []
    vec_bytes = 8 * dim
    for i in range(count):
        if off + _ID_LEN.size > len(blob):
            raise IndexFormatError(f"truncated at entry {i}")
        (id_len,) = _ID_LEN.unpack_from(blob, off)
        off += _ID_LEN.size
        end = off + id_len + _LABEL.size + vec_bytes
        if end > len(blob):
            raise IndexFormatError(f"truncated at entry {i}")
        try:
            cid = blob[off : off + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"entry {i} id is not UTF-8") from exc
        off += id_len
        (label,) = _LABEL.unpack_from(blob, off)
        off += _LABEL.size
        vec = np.frombuffer(blob, dtype="<f8", count=dim, offset=off).astype(
            np.float64
        )
        off += vec_bytes
        ids.append(cid)
        labels.append(label)
        vecs.append(vec)
    if off != len(blob):
        raise IndexFormatError(f"{len(blob) - off} trailing bytes")
    vectors = np.stack(vecs) if vecs else np.zeros((0, dim))
    try:
        return EmbeddingIndex(tuple(ids), tuple(labels), vectors, dim)
    except (DataError, UsageError) as exc:
        raise IndexFormatError(str(exc)) from exc

"""
CiteGuard Vector Index
======================

Exact flat inner-product index over unit vectors. Rows are stored as 32-bit
floats and widened to float64 for scoring; ties rank by ascending row_id.

index.bin layout (little-endian):
    b"CIRX" | version u32 (=1) | dim u32 | n u64 | n*dim float32 row-major | CRC32C u32
rows.jsonl: one {row_id, chunk_id, doc_id, page_start, page_end} per row.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import crc32c
import numpy as np

from core_model import Chunk, CiteGuardError, ScoredChunk
from embedding_provider import NORM_TOLERANCE, DimensionMismatch, EmbeddingVector

logger = logging.getLogger(__name__)

MAGIC = b"CIRX"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIQ")
CRC = struct.Struct("<I")
INDEX_FILE = "index.bin"
ROWS_FILE = "rows.jsonl"


class VectorIndexError(CiteGuardError):
    pass


class DuplicateChunkRef(VectorIndexError):
    pass


class NotNormalized(VectorIndexError):
    pass


class IndexFormatError(VectorIndexError):
    pass


class BadMagic(IndexFormatError):
    pass


class UnsupportedVersion(IndexFormatError):
    pass


class ChecksumMismatch(IndexFormatError):
    pass


class TruncatedFile(IndexFormatError):
    pass


class TrailingData(IndexFormatError):
    pass


class SidecarMismatch(IndexFormatError):
    pass


@dataclass(frozen=True)
class RowMeta:
    row_id: int
    chunk_id: str
    doc_id: str
    page_start: int
    page_end: int

    def to_dict(self) -> Dict:
        return {
            "row_id": self.row_id,
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "page_start": self.page_start,
            "page_end": self.page_end,
        }


class VectorIndex:
    """Immutable after construction; safe for concurrent searches"""

    def __init__(self, dim: int, matrix: np.ndarray, row_meta: List[RowMeta],
                 chunks: Optional[Sequence[Chunk]] = None):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32).reshape(-1, dim) if dim else \
            np.zeros((0, 0), dtype=np.float32)
        matrix.setflags(write=False)
        self.dim = dim
        self.matrix = matrix
        self.row_meta = list(row_meta)
        # float32 rounding is undone by renormalizing in float64, so scores are exact cosines
        scoring = matrix.astype(np.float64)
        if scoring.size:
            scoring /= np.linalg.norm(scoring, axis=1, keepdims=True)
        self._scoring = scoring
        self._chunks: Optional[List[Chunk]] = None
        if chunks is not None:
            self.attach_chunks(chunks)

    @property
    def n(self) -> int:
        return len(self.row_meta)

    def attach_chunks(self, chunks: Sequence[Chunk]):
        """Resolve row metadata against a chunk store for text lookup"""
        by_ref = {(c.doc_id, c.chunk_id): c for c in chunks}
        resolved = []
        for meta in self.row_meta:
            chunk = by_ref.get((meta.doc_id, meta.chunk_id))
            if chunk is None:
                raise SidecarMismatch(f"row {meta.row_id} references missing chunk {meta.doc_id}/{meta.chunk_id}")
            resolved.append(chunk)
        self._chunks = resolved

    def search_rows(self, q: EmbeddingVector, k: int) -> List[Tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.n == 0:
            return []
        if q.dim != self.dim:
            raise DimensionMismatch(f"query dim {q.dim} != index dim {self.dim}")
        scores = np.clip(self._scoring @ q.values, -1.0, 1.0)
        order = np.lexsort((np.arange(self.n), -scores))[:min(k, self.n)]
        return [(int(row), float(scores[row])) for row in order]

    def search(self, q: EmbeddingVector, k: int) -> List[ScoredChunk]:
        if self._chunks is None and self.n:
            raise RuntimeError("chunks are not attached to this index")
        return [ScoredChunk(chunk=self._chunks[row], score=score) for row, score in self.search_rows(q, k)]


def build(vectors: Sequence[EmbeddingVector], chunks: Sequence[Chunk]) -> VectorIndex:
    """Dense index with row_id assigned by input order"""
    if len(vectors) != len(chunks):
        raise ValueError(f"{len(vectors)} vectors for {len(chunks)} chunks")
    if not vectors:
        return VectorIndex(0, np.zeros((0, 0), dtype=np.float32), [], chunks=[])

    dim = vectors[0].dim
    seen = set()
    meta = []
    for row, (vec, chunk) in enumerate(zip(vectors, chunks)):
        if vec.dim != dim:
            raise DimensionMismatch(f"row {row} has dim {vec.dim}, expected {dim}")
        norm = float(np.linalg.norm(vec.values))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise NotNormalized(f"row {row} has norm {norm:.9f}")
        ref = (chunk.doc_id, chunk.chunk_id)
        if ref in seen:
            raise DuplicateChunkRef(f"duplicate chunk reference {ref[0]}/{ref[1]}")
        seen.add(ref)
        meta.append(RowMeta(row, chunk.chunk_id, chunk.doc_id, chunk.page_start, chunk.page_end))

    matrix = np.vstack([v.values for v in vectors]).astype(np.float32)
    logger.info(f"Built flat index: n={len(meta)} dim={dim}")
    return VectorIndex(dim, matrix, meta, chunks=chunks)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def encode_index(ix: VectorIndex) -> bytes:
    """Serialize to the index.bin byte layout"""
    body = HEADER.pack(MAGIC, FORMAT_VERSION, ix.dim, ix.n) + ix.matrix.astype("<f4").tobytes(order="C")
    return body + CRC.pack(crc32c.crc32c(body))


def decode_index(data: bytes) -> Tuple[int, np.ndarray]:
    """Parse index.bin bytes; every structural defect raises an IndexFormatError"""
    if len(data) < 4:
        raise TruncatedFile(f"{len(data)} bytes is shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"magic {data[:4]!r} != {MAGIC!r}")
    if len(data) < HEADER.size:
        raise TruncatedFile("header is incomplete")
    _, version, dim, n = HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"index format version {version} (supported: {FORMAT_VERSION})")
    expected = HEADER.size + n * dim * 4 + CRC.size
    if len(data) < expected:
        raise TruncatedFile(f"{len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise TrailingData(f"{len(data) - expected} unexpected trailing bytes")
    body = data[:expected - CRC.size]
    (stored,) = CRC.unpack_from(data, expected - CRC.size)
    actual = crc32c.crc32c(body)
    if stored != actual:
        raise ChecksumMismatch(f"stored CRC32C {stored:08x} != computed {actual:08x}")
    if n * dim == 0:
        return dim, np.zeros((n, dim), dtype=np.float32)
    matrix = np.frombuffer(body, dtype="<f4", offset=HEADER.size).astype(np.float32)
    return dim, matrix.reshape(n, dim)


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def rows_jsonl(ix: VectorIndex) -> bytes:
    return "".join(json.dumps(m.to_dict(), sort_keys=True) + "\n" for m in ix.row_meta).encode("utf-8")


def save(ix: VectorIndex, directory: Union[str, Path]):
    """Write index.bin and rows.jsonl into directory"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _atomic_write(directory / INDEX_FILE, encode_index(ix))
    _atomic_write(directory / ROWS_FILE, rows_jsonl(ix))


def load(directory: Union[str, Path], chunks: Optional[Sequence[Chunk]] = None) -> VectorIndex:
    """Read index.bin and rows.jsonl; rows are checked against chunks when given"""
    directory = Path(directory)
    dim, matrix = decode_index((directory / INDEX_FILE).read_bytes())
    meta: List[RowMeta] = []
    with open(directory / ROWS_FILE, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            raw = json.loads(line)
            row = RowMeta(int(raw["row_id"]), raw["chunk_id"], raw["doc_id"],
                          int(raw["page_start"]), int(raw["page_end"]))
            if row.row_id != len(meta):
                raise SidecarMismatch(f"row_id {row.row_id} at position {len(meta)}")
            meta.append(row)
    if len(meta) != matrix.shape[0]:
        raise SidecarMismatch(f"{len(meta)} sidecar rows for {matrix.shape[0]} matrix rows")
    return VectorIndex(dim, matrix, meta, chunks=chunks)
